#!/usr/bin/env python3
"""
Run configuration for EncDec Lab.

A run config is a flat text file of dotted ``section.key=value`` lines laid
over nested defaults. Values parse as JSON when they can and stay strings
otherwise. ``--set`` overrides use the same syntax; a bare key resolves to
the one section that defines it.

Author: Matt Y
License: MIT
Version: 1.0.0
"""

import copy
import hashlib
import json
import logging
import os

from constants import (
    BENCH_WORKLOAD,
    DESK_SPLITS,
    ERROR_MESSAGES,
    KD_DEFAULTS,
    PROFILE_DEFAULTS,
    TASK_KINDS,
    TRAIN_DEFAULTS,
)
from distillation import KDConfig
from evals import METRICS
from lab_errors import ConfigError, DomainError, ModelConfigError, UsageError
from model_zoo import desk_config, toy_config
from trainer import TrainConfig

logger = logging.getLogger(__name__)

MODEL_OVERRIDE_KEYS = ("d_model", "n_heads", "n_kv_heads", "d_ff", "vocab_size", "rope_base",
                       "ntk_train_len", "max_enc_len", "max_dec_len")

# Default run configuration
DEFAULT_RUN_CONFIG = {
    "run": {
        "seed": 0,
        "dtype": "float32",
    },
    "model": {
        "preset": "toy",              # toy, desk
        "kind": "encoder_decoder",    # encoder_decoder, decoder_only
        "split": "2/3-1/3",           # desk encoder/decoder split
        "n_enc_layers": 1,            # toy preset only
        "n_dec_layers": None,         # None: preset default (desk decoder-only: matched depth)
        "checkpoint": None,           # start from this checkpoint instead of a fresh init
        "d_model": None,
        "n_heads": None,
        "n_kv_heads": None,
        "d_ff": None,
        "vocab_size": None,
        "rope_base": None,
        "ntk_train_len": None,
        "max_enc_len": None,
        "max_dec_len": None,
    },
    "teacher": {
        "checkpoint": None,           # required by distill when kd.alpha > 0
    },
    "data": {
        "task": "copy",               # copy, reverse, compress, expand
        "n_examples": 256,
        "min_len": 4,
        "max_len": 32,
        "records": None,              # dataset record file, replaces the synthetic task
        "held_out_records": None,     # record file for held-out perplexity
        "corpus": None,               # pretraining text, one document per line
        "n_documents": 64,            # random-letter documents when no corpus is given
        "doc_len": 256,
        "seq_len": 64,
    },
    "train": {
        "total_steps": 200,
        "warmup_steps": "auto",
        "peak_lr": TRAIN_DEFAULTS["peak_lr"],
        "schedule": "warmup_cosine",
        "batch_size": 8,
        "grad_accum_steps": 1,
        "enc_len": 64,
        "dec_len": 64,
        "weight_decay": TRAIN_DEFAULTS["weight_decay"],
        "beta1": TRAIN_DEFAULTS["beta1"],
        "beta2": TRAIN_DEFAULTS["beta2"],
        "adam_eps": TRAIN_DEFAULTS["adam_eps"],
        "resume": None,               # checkpoint with optimizer state to continue from
    },
    "kd": dict(KD_DEFAULTS),
    "eval": {
        "tasks": list(TASK_KINDS),
        "metric": "rouge_l",
        "n_examples": 32,
        "seeds": [0, 1, 2],
        "max_new": None,
        "checkpoints": [],            # models to compare; default is model.checkpoint
        "perplexity": True,
    },
    "profile": {
        "preset": "desk",
        "split": "2/3-1/3",
        "input_lens": list(PROFILE_DEFAULTS["input_lens"]),
        "output_len": PROFILE_DEFAULTS["output_len"],
        "batch_size": PROFILE_DEFAULTS["batch_size"],
        "element_bytes": PROFILE_DEFAULTS["element_bytes"],
        "prefill_chunk": PROFILE_DEFAULTS["prefill_chunk"],
        "cross_kv_mode": "precomputed",
        "claims": True,
        "plot": True,
    },
    "bench": {
        "input_len": BENCH_WORKLOAD["input_len"],
        "output_len": BENCH_WORKLOAD["output_len"],
        "n_trials": BENCH_WORKLOAD["n_trials"],
        "warmups": BENCH_WORKLOAD["warmups"],
        "n_enc_layers": 2,            # toy encoder-decoder; the decoder-only side is parameter-matched
        "n_dec_layers": 1,
        "checkpoint_a": None,
        "checkpoint_b": None,
    },
}


def default_run_config():
    return copy.deepcopy(DEFAULT_RUN_CONFIG)


def parse_value(text):
    """JSON value when the text parses as one, otherwise the stripped string."""
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_key(key):
    """
    Full ``section.key`` path for a dotted or bare key.

    Raises:
        UsageError: unknown key, or a bare key defined by more than one section
    """
    key = key.strip()
    if "." in key:
        section, _, name = key.partition(".")
        if section in DEFAULT_RUN_CONFIG and name in DEFAULT_RUN_CONFIG[section]:
            return key
        raise UsageError(ERROR_MESSAGES["unknown_key"].format(key=key))
    owners = [section for section, values in DEFAULT_RUN_CONFIG.items() if key in values]
    if not owners:
        raise UsageError(ERROR_MESSAGES["unknown_key"].format(key=key))
    if len(owners) > 1:
        raise UsageError(ERROR_MESSAGES["ambiguous_key"].format(
            key=key, candidates=", ".join(f"{s}.{key}" for s in owners)))
    return f"{owners[0]}.{key}"


def get_value(config, key_path, default=None):
    """Value at a dotted path, or ``default``."""
    value = config
    for key in key_path.split("."):
        if isinstance(value, dict) and key in value:
            value = value[key]
        else:
            return default
    return value


def set_value(config, key_path, value):
    keys = key_path.split(".")
    current = config
    for key in keys[:-1]:
        current = current.setdefault(key, {})
    current[keys[-1]] = value


def parse_assignment(line):
    """Split ``key=value`` into (key, parsed value)."""
    key, sep, value = line.partition("=")
    if not sep or not key.strip():
        raise UsageError(f"expected key=value, got {line!r}")
    return key.strip(), parse_value(value)


def parse_config_text(text, source="<config>"):
    """
    Parse run-config text into a list of (full key, value) assignments.

    Blank lines and lines starting with '#' are skipped.
    """
    assignments = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(ERROR_MESSAGES["config_parse"].format(path=source, line_no=number, line=line))
        key, value = parse_assignment(line)
        assignments.append((resolve_key(key), value))
    return assignments


def load_run_config(path=None, overrides=()):
    """
    Defaults, then the config file at ``path``, then ``key=value`` overrides.

    Raises:
        ConfigError: missing or unparsable file, or invalid resolved values
        UsageError: unknown or ambiguous keys
    """
    config = default_run_config()
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(ERROR_MESSAGES["config_missing"].format(path=path))
        try:
            with open(path, "r", encoding="utf-8") as f:
                text = f.read()
        except (IOError, OSError, UnicodeDecodeError) as e:
            raise ConfigError(f"Cannot read config file {path}: {e}") from e
        for key, value in parse_config_text(text, source=path):
            set_value(config, key, value)

    for item in overrides:
        key, value = parse_assignment(item)
        full = resolve_key(key)
        logger.debug("override %s = %r", full, value)
        set_value(config, full, value)

    validate_run_config(config)
    return config


def dump_config_text(config):
    """Flat ``section.key=value`` text that loads back to ``config``."""
    lines = []
    for section in DEFAULT_RUN_CONFIG:
        for key in DEFAULT_RUN_CONFIG[section]:
            lines.append(f"{section}.{key}={json.dumps(config[section][key])}")
    return "\n".join(lines) + "\n"


def config_hash(config):
    """SHA-256 of the canonical JSON form of a resolved config."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ============================================================================
# Typed views
# ============================================================================

def model_config_from(config, section="model"):
    """ModelConfig from the model section (or a section with the same preset keys)."""
    values = config[section]
    overrides = {k: values[k] for k in MODEL_OVERRIDE_KEYS if values.get(k) is not None}
    try:
        if values["preset"] == "desk":
            return desk_config(values["kind"], values["split"], values["n_dec_layers"], **overrides)
        if values["preset"] == "toy":
            return toy_config(values["kind"], values["n_enc_layers"], values["n_dec_layers"] or 1,
                              **overrides)
    except KeyError as e:
        raise ConfigError(f"unknown desk split {values['split']!r}") from e
    except TypeError as e:
        raise ConfigError(f"invalid model settings: {e}") from e
    raise ConfigError(f"model.preset must be 'toy' or 'desk', got {values['preset']!r}")


def train_config_from(config, objective):
    values = {k: v for k, v in config["train"].items() if k != "resume"}
    try:
        return TrainConfig(objective=objective, seed=config["run"]["seed"], **values)
    except TypeError as e:
        raise ConfigError(f"invalid train settings: {e}") from e


def kd_config_from(config):
    try:
        return KDConfig(**config["kd"])
    except DomainError as e:
        raise ConfigError(f"invalid kd settings: {e}") from e
    except TypeError as e:
        raise ConfigError(f"invalid kd settings: {e}") from e


# (section, key) -> smallest allowed integer
INT_FIELDS = {
    ("data", "n_examples"): 1,
    ("data", "min_len"): 1,
    ("data", "max_len"): 1,
    ("data", "n_documents"): 1,
    ("data", "doc_len"): 1,
    ("data", "seq_len"): 1,
    ("eval", "n_examples"): 1,
    ("profile", "output_len"): 0,
    ("profile", "batch_size"): 1,
    ("profile", "element_bytes"): 1,
    ("profile", "prefill_chunk"): 1,
    ("bench", "input_len"): 1,
    ("bench", "output_len"): 1,
    ("bench", "n_trials"): 1,
    ("bench", "warmups"): 0,
    ("bench", "n_enc_layers"): 1,
    ("bench", "n_dec_layers"): 1,
}
PATH_FIELDS = (("model", "checkpoint"), ("teacher", "checkpoint"), ("data", "records"),
               ("data", "held_out_records"), ("data", "corpus"), ("train", "resume"),
               ("bench", "checkpoint_a"), ("bench", "checkpoint_b"))
BOOL_FIELDS = (("eval", "perplexity"), ("profile", "claims"), ("profile", "plot"))


def _is_int(value):
    return isinstance(value, int) and not isinstance(value, bool)


def _int_list(value, minimum):
    return isinstance(value, list) and value and all(_is_int(v) and v >= minimum for v in value)


def field_problems(config):
    """Type and range problems outside the model/train/kd sections, as readable strings."""
    problems = []
    for (section, key), minimum in INT_FIELDS.items():
        value = config[section][key]
        if not _is_int(value) or value < minimum:
            problems.append(f"{section}.{key} must be an integer >= {minimum}, got {value!r}")
    for section, key in PATH_FIELDS:
        value = config[section][key]
        if value is not None and not (isinstance(value, str) and value):
            problems.append(f"{section}.{key} must be a path or null, got {value!r}")
    for section, key in BOOL_FIELDS:
        if not isinstance(config[section][key], bool):
            problems.append(f"{section}.{key} must be true or false, got {config[section][key]!r}")

    data = config["data"]
    if _is_int(data["min_len"]) and _is_int(data["max_len"]) and data["min_len"] > data["max_len"]:
        problems.append(f"data.min_len ({data['min_len']}) exceeds data.max_len ({data['max_len']})")

    section = config["eval"]
    tasks = section["tasks"]
    if not isinstance(tasks, list) or not tasks or any(t not in TASK_KINDS for t in tasks):
        problems.append(f"eval.tasks must be a non-empty list drawn from {TASK_KINDS}, got {tasks!r}")
    if section["metric"] not in METRICS:
        problems.append(f"eval.metric must be one of {METRICS}, got {section['metric']!r}")
    if not _int_list(section["seeds"], 0):
        problems.append(f"eval.seeds must be a non-empty list of integers >= 0, got {section['seeds']!r}")
    if section["max_new"] is not None and (not _is_int(section["max_new"]) or section["max_new"] < 1):
        problems.append(f"eval.max_new must be a positive integer or null, got {section['max_new']!r}")
    checkpoints = section["checkpoints"]
    if not isinstance(checkpoints, list) or not all(isinstance(p, str) and p for p in checkpoints):
        problems.append(f"eval.checkpoints must be a list of paths, got {checkpoints!r}")

    section = config["profile"]
    if section["preset"] not in ("desk", "toy"):
        problems.append(f"profile.preset must be desk or toy, got {section['preset']!r}")
    if section["split"] not in DESK_SPLITS:
        problems.append(f"profile.split must be one of {sorted(DESK_SPLITS)}, got {section['split']!r}")
    if not _int_list(section["input_lens"], 1):
        problems.append(f"profile.input_lens must be a non-empty list of positive integers, "
                        f"got {section['input_lens']!r}")
    if section["cross_kv_mode"] not in ("precomputed", "recompute"):
        problems.append("profile.cross_kv_mode must be precomputed or recompute")
    return problems


def validate_run_config(config):
    """Build every typed view once and check the remaining fields; any failure becomes a ConfigError."""
    if config["run"]["dtype"] not in ("float32", "float64"):
        raise ConfigError(f"run.dtype must be float32 or float64, got {config['run']['dtype']!r}")
    if not _is_int(config["run"]["seed"]):
        raise ConfigError(f"run.seed must be an integer, got {config['run']['seed']!r}")
    if config["data"]["task"] not in TASK_KINDS:
        raise ConfigError(f"data.task must be one of {TASK_KINDS}, got {config['data']['task']!r}")
    try:
        model_config_from(config)
    except ModelConfigError as e:
        raise ConfigError(str(e)) from e
    train_config_from(config, "seq2seq")
    kd_config_from(config)
    problems = field_problems(config)
    if problems:
        raise ConfigError("; ".join(problems))
    return True
