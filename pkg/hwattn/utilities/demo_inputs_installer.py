import shutil
from pathlib import Path

from hwattn.run import Global as gl


def main():
    """
    This function asks whether and where to copy the bundled hwattn run configs, then calls copy_demo_configs.
    """
    choice = input("Do you want to copy the hwattn demo run configs? (y/n): ").strip().lower()
    if choice == "y":
        destination_path = input("Enter the path where you want to copy the demo configs: ").strip()
        copy_demo_configs(destination_path)
    else:
        print("Demo configs were not copied.")


def copy_demo_configs(destination_path: str, overwrite: bool = False) -> Path:
    """
    This function copies the hwattn.resources configs (toy.cfg, tiny.cfg) to destination_path/demo_configs.

    Args:
        destination_path (str | Path): Path of destination directory
        overwrite (bool, optional): replace configs that already exist. Defaults to False.

    Returns:
        Path: directory holding the copied configs
    """
    destination_path = Path(destination_path) / "demo_configs"
    destination_path.mkdir(parents=True, exist_ok=True)

    for item in sorted(gl.CONFIGS_DIR.glob("*.cfg")):
        target = destination_path / item.name
        if target.exists() and not overwrite:
            print(f"skipping existing {target}")
            continue
        shutil.copy(item, target)
    print(f"hwattn demo configs copied to {destination_path.resolve()}")
    return destination_path
