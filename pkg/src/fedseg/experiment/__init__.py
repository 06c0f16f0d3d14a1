"""Configuration, checkpoints and the reproduction pipeline."""
from .checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from .config import KEYS, DetectConfig, ExperimentConfig, dump_config, load_config, parse_config
from .pipeline import cmd_compare, cmd_detect, cmd_eval, cmd_run, prepare_data, read_manifest

__all__ = [
    "decode_checkpoint", "encode_checkpoint", "load_checkpoint", "save_checkpoint",
    "KEYS", "DetectConfig", "ExperimentConfig", "dump_config", "load_config", "parse_config",
    "cmd_compare", "cmd_detect", "cmd_eval", "cmd_run", "prepare_data", "read_manifest",
]
