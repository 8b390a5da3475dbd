class ConfigError(ValueError):
    """
    Invalid configuration value. `key` names the offending field so the CLI can report it.
    """

    def __init__(self, key: str, message: str) -> None:
        self.key = key
        super().__init__(f"{key}: {message}")
