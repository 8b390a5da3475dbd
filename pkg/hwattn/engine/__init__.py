"""Decoder model, attention masks, hybrid KV cache and decoding."""
