# -*- coding: UTF-8 -*-
import os
import re
import json
import copy
import logging
from typing import Dict, List, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

CONFIG_PATH = os.path.normpath(
    os.path.join(os.path.dirname(os.path.abspath(__file__)), "config.json"))


def _merge(base: dict, override: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(path: Optional[str] = None) -> dict:
    """Returns package defaults from config.json, with the JSON file at
    `path` (if given) merged over them key by key."""
    with open(CONFIG_PATH, "r") as f:
        cfg = json.load(f)
    if path:
        with open(path, "r") as f:
            user_cfg = json.load(f)
        logger.debug(f"Merging user config from {path}")
        cfg = _merge(cfg, user_cfg)
    return cfg


CFG = load_config()


def use_config(cfg: dict):
    """Replaces the active configuration in place, so modules holding CFG
    see the new values."""
    if cfg is not CFG:
        new = copy.deepcopy(cfg)
        CFG.clear()
        CFG.update(new)


def derive_seeds(seed: int, count: int) -> List[int]:
    """Independent child seeds; element k depends only on (seed, k)."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(child.generate_state(1)[0]) for child in children]


def default_workers(cfg: Optional[dict] = None) -> int:
    cfg = cfg or CFG
    raw = os.environ.get(cfg["cli"]["workers_env"], "")
    try:
        workers = int(raw)
    except ValueError:
        if raw:
            logger.error(f"Ignoring non-integer worker count [{raw}]")
        return 1
    return max(1, workers)


def validate_filename(string: str) -> str:
    """Output base names may only hold letters, digits, ' ', '-', '_', '.'
    and path separators."""
    filename = ""
    for ind, char in enumerate(string):
        if char.isalnum() or char in " -_./" or char == os.sep:
            filename = filename + char
        else:
            raise ValueError(
                f"Char {ind} invalid in {string}. File name must consist of letters, numbers, '-', '_' and '.'"
            )
    return filename


def parse_columns(text: str, names: Sequence[str]) -> List[int]:
    """Turns 'x1,x3' or '0,2' into covariate indices. Names win over digits."""
    indices = []
    for token in filter(None, (t.strip() for t in text.split(","))):
        if token in names:
            indices.append(list(names).index(token))
        elif re.fullmatch(r"\d+", token) and int(token) < len(names):
            indices.append(int(token))
        else:
            raise ValueError(
                f"Unknown covariate [{token}]. Available covariates: {list(names)}")
    return indices


def fmt_number(value: Optional[float], digits: int = 4) -> str:
    if value is None:
        return "--"
    return f"{value:.{digits}f}"


def resolved(value, section: str, key: str, cfg: Optional[Dict] = None):
    """`value` unless it is None, then the configured default."""
    if value is not None:
        return value
    return (cfg or CFG)[section][key]
