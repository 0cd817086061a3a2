#!/usr/bin/env python3
"""
EncDec Lab command line.

Subcommands pretrain | finetune | distill | eval | profile | bench, each
driven by a run-config file plus ``--set key=value`` overrides. Every run
writes manifest.json (config hash, seed, versions) into ``--out``.

Exit codes: 0 ok, 1 runtime failure, 2 usage error, 3 config error. On
failure exactly one line ``error[<category>]: <message>`` goes to stderr.

Author: Matt Y
License: MIT
Version: 1.0.0
"""

import os

from constants import THREAD_ENV_VARS

# BLAS threads are pinned before numpy loads so benchmarks are single-threaded
for _var in THREAD_ENV_VARS:
    os.environ.setdefault(_var, "1")

import argparse
import logging
import sys

import numpy as np

from artifact_utils import (
    artifact_path,
    build_manifest,
    describe_age,
    ensure_out_dir,
    list_artifacts,
    sanitize_artifact_name,
    save_csv,
    save_json,
    save_text,
    write_manifest,
)
from constants import (
    APP_NAME,
    APP_VERSION,
    DEFAULT_OUT_DIR,
    ERROR_MESSAGES,
    EXIT_CODES,
    SUCCESS_MESSAGES,
)
from data_pipeline import (
    make_synthetic_task,
    random_letter_documents,
    read_corpus,
    read_records,
    span_corruption_examples,
)
from evals import eval_grid, grid_table, held_out_examples, perplexity
from lab_errors import ConfigError, LabError, UsageError
from model_zoo import build_model, match_decoder_only, matched_pair, toy_config
from print_utils import (
    print_error,
    print_header,
    print_info,
    print_status,
    print_success,
    print_table,
    print_warning,
    set_quiet,
)
from profiler import Workload, analytic_report, bench, claim_checks, plot_sweep, sweep
from run_config import config_hash, kd_config_from, load_run_config, model_config_from, train_config_from
from tensor_autograd import set_default_dtype
from trainer import load_checkpoint, save_checkpoint, train

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("pretrain", "finetune", "distill", "eval", "profile", "bench")
OBJECTIVES = {"pretrain": "span_corruption", "finetune": "seq2seq", "distill": "kd"}


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting."""

    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="edlab", description=f"{APP_NAME} v{APP_VERSION}: encoder-decoder vs "
                                               "decoder-only transformer experiments")
    parser.add_argument("subcommand", choices=SUBCOMMANDS, help="What to run")
    parser.add_argument("--config", help="Run-config file of section.key=value lines")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override one config value (repeatable)")
    parser.add_argument("--out", default=DEFAULT_OUT_DIR, help=f"Output directory (default: {DEFAULT_OUT_DIR})")
    parser.add_argument("--verbose", action="store_true", help="Enable debug logging")
    parser.add_argument("--quiet", action="store_true", help="Only print errors")
    return parser


def configure_logging(verbose):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format='%(asctime)s - %(levelname)s - %(name)s - %(message)s',
        handlers=[logging.StreamHandler(sys.stderr)],
        force=True,
    )


# ============================================================================
# Shared pieces
# ============================================================================

def _load_model(path, with_optimizer=False):
    if not os.path.exists(path):
        raise ConfigError(ERROR_MESSAGES["checkpoint_missing"].format(path=path))
    return load_checkpoint(path, with_optimizer=with_optimizer)


def _student(config):
    """(model, optimizer or None, start step) for a training run."""
    resume = config["train"]["resume"]
    if resume:
        model, optimizer, manifest = _load_model(resume, with_optimizer=True)
        print_info(f"Resuming from {resume} at step {manifest['step']}")
        return model, optimizer, manifest["step"]
    if config["model"]["checkpoint"]:
        model, _, _ = _load_model(config["model"]["checkpoint"])
        return model, None, 0
    return build_model(model_config_from(config), config["run"]["seed"]), None, 0


def _task_examples(config):
    data = config["data"]
    if data["records"]:
        return read_records(data["records"])
    return make_synthetic_task(data["task"], data["n_examples"], rng_seed=config["run"]["seed"],
                               min_len=data["min_len"], max_len=data["max_len"])


def _held_out_examples(config):
    """Perplexity examples disjoint from the ones _task_examples trains on, or None."""
    data = config["data"]
    if data["held_out_records"]:
        return read_records(data["held_out_records"])
    if data["records"]:
        return None
    return held_out_examples(data["task"], data["n_examples"], config["run"]["seed"], data["min_len"],
                             data["max_len"], exclude=_task_examples(config))


def _pretrain_examples(config):
    data = config["data"]
    if data["corpus"]:
        documents = read_corpus(data["corpus"])
    else:
        documents = random_letter_documents(data["n_documents"], data["doc_len"], rng_seed=config["run"]["seed"])
    return span_corruption_examples(documents, data["seq_len"], rng_seed=config["run"]["seed"])


# ============================================================================
# Subcommands
# ============================================================================

def cmd_train(subcommand, config, out_dir, manifest):
    objective = OBJECTIVES[subcommand]
    cfg = train_config_from(config, objective)
    teacher, kd_cfg = None, None
    if objective == "kd":
        kd_cfg = kd_config_from(config)
        if kd_cfg.alpha > 0:
            if not config["teacher"]["checkpoint"]:
                raise ConfigError(ERROR_MESSAGES["teacher_required"])
            teacher, _, _ = _load_model(config["teacher"]["checkpoint"])
            if teacher.config.is_encoder_decoder:
                raise ConfigError(ERROR_MESSAGES["teacher_required"])

    dataset = _pretrain_examples(config) if objective == "span_corruption" else _task_examples(config)
    model, optimizer, start_step = _student(config)
    print_info(f"{model!r}, {len(dataset)} examples, objective {objective}")

    result = train(model, dataset, cfg, teacher=teacher, kd_cfg=kd_cfg, optimizer=optimizer,
                   start_step=start_step)
    save_csv(result.metrics, artifact_path(out_dir, "metrics"))
    ckpt = save_checkpoint(artifact_path(out_dir, "checkpoint"), model, result.optimizer,
                           step=result.final_step, extra={"config_hash": manifest["config_hash"]})
    manifest["result"] = {"final_step": result.final_step, "final_loss": result.final_loss}
    print_success(SUCCESS_MESSAGES["training_done"].format(steps=result.final_step, loss=result.final_loss))
    print_success(SUCCESS_MESSAGES["checkpoint_saved"].format(path=ckpt))


def cmd_eval(config, out_dir, manifest):
    section = config["eval"]
    paths = list(section["checkpoints"]) or ([config["model"]["checkpoint"]] if config["model"]["checkpoint"] else [])
    if not paths:
        raise ConfigError("eval needs eval.checkpoints or model.checkpoint")
    models = {}
    for path in paths:
        name = sanitize_artifact_name(os.path.basename(os.path.dirname(os.path.abspath(path))) or path)
        if name in models:
            name = sanitize_artifact_name(path)
        models[name], _, _ = _load_model(path)

    grid, raw = eval_grid(models, section["tasks"], section["metric"], section["n_examples"],
                          section["seeds"], section["max_new"], config["data"]["min_len"],
                          config["data"]["max_len"])
    save_csv(grid, artifact_path(out_dir, "eval_grid"))
    save_csv(raw, artifact_path(out_dir, "eval_raw"))
    table = grid_table(grid)
    save_text(table, artifact_path(out_dir, "eval_table"))
    print_header(f"{section['metric']} by model and task")
    for line in table.splitlines():
        print_info(line)

    if section["perplexity"]:
        held_out = _held_out_examples(config)
        if not held_out:
            print_warning("perplexity skipped: set data.held_out_records to score a record-file task")
            return
        scores = {name: perplexity(model, held_out) for name, model in models.items()}
        manifest["perplexity"] = scores
        for name, value in scores.items():
            print_status("info", f"{name}: perplexity {value:.4f} on {len(held_out)} held-out examples")


def _profile_pair(config):
    section = config["profile"]
    if section["preset"] == "desk":
        return matched_pair(section["split"])
    encdec = model_config_from(config)
    if not encdec.is_encoder_decoder:
        raise ConfigError("profile with the toy preset needs model.kind=encoder_decoder")
    deconly, diff = match_decoder_only(encdec)
    logger.info("matched decoder-only depth %d (%.2f%% parameter difference)", deconly.n_dec_layers, 100 * diff)
    return encdec, deconly


def cmd_profile(config, out_dir, manifest):
    section = config["profile"]
    encdec, deconly = _profile_pair(config)
    frame = sweep(encdec, deconly, section["input_lens"], section["output_len"], section["batch_size"],
                  section["element_bytes"], section["prefill_chunk"], section["cross_kv_mode"])
    save_csv(frame, artifact_path(out_dir, "sweep"))

    workload = Workload(max(section["input_lens"]), section["output_len"], section["batch_size"],
                        section["element_bytes"], section["prefill_chunk"])
    for model_config in (encdec, deconly):
        report = analytic_report(model_config, workload, section["cross_kv_mode"])
        name = sanitize_artifact_name(f"profile_{model_config.kind}") + ".json"
        save_json(report.to_dict(), os.path.join(out_dir, name))

    print_header("Encoder-decoder / decoder-only cost ratios")
    print_table(frame[["input_len", "inference_ratio", "training_ratio", "memory_ratio"]].values.tolist(),
                ["input_len", "inference", "training", "memory"])

    if section["claims"]:
        claims = claim_checks(section["prefill_chunk"], section["element_bytes"])
        save_json(claims, artifact_path(out_dir, "claims"))
        for name, claim in claims.items():
            if "value" in claim:
                in_band = ", ".join(claim["pairs_in_band"]) or "none"
                detail = (f"{claim['value']:.3f} (reference {claim['reference']}, band {claim['band']}; "
                          f"splits in band: {in_band})")
            else:
                detail = "monotone" if claim["passed"] else "not monotone"
            print_status("success" if claim["passed"] else "warning", f"{name} [{claim['pair']}]: {detail}")
        manifest["claims_passed"] = all(c["passed"] for c in claims.values())
    if section["plot"]:
        plot_sweep(frame, artifact_path(out_dir, "sweep_plot"))


def cmd_bench(config, out_dir, manifest):
    section = config["bench"]
    if section["checkpoint_a"] and section["checkpoint_b"]:
        model_a, _, _ = _load_model(section["checkpoint_a"])
        model_b, _, _ = _load_model(section["checkpoint_b"])
    else:
        encdec = toy_config("encoder_decoder", section["n_enc_layers"], section["n_dec_layers"],
                            max_enc_len=max(section["input_len"], 1), max_dec_len=max(section["output_len"], 1))
        deconly, diff = match_decoder_only(encdec)
        logger.info("bench pair differs by %.2f%% in parameters", 100 * diff)
        model_a = build_model(encdec, config["run"]["seed"])
        model_b = build_model(deconly, config["run"]["seed"])

    workload = Workload(section["input_len"], section["output_len"])
    report_a, report_b = bench(model_a, model_b, workload, section["n_trials"], section["warmups"],
                               seed=config["run"]["seed"])
    save_json({"a": report_a.to_dict(), "b": report_b.to_dict()}, artifact_path(out_dir, "bench"))
    print_header(f"Bench: {workload.input_len} in / {workload.output_len} out")
    print_table([[r.kind, r.first_token_ms, r.tokens_per_s if r.tokens_per_s is not None else "n/a",
                  r.n_valid_trials] for r in (report_a, report_b)],
                ["model", "first_ms", "tokens_per_s", "trials"], float_fmt="{:.2f}")


# ============================================================================
# Entry points
# ============================================================================

def run(subcommand, config_path=None, overrides=(), out_dir=DEFAULT_OUT_DIR):
    """
    Run one subcommand and write its artifacts.

    Returns:
        The manifest dict that was written
    """
    config = load_run_config(config_path, overrides)
    set_default_dtype(np.dtype(config["run"]["dtype"]))
    digest = config_hash(config)
    ensure_out_dir(out_dir)
    manifest = build_manifest(subcommand, config, digest)
    logger.debug("config hash %s", digest)

    if subcommand in OBJECTIVES:
        cmd_train(subcommand, config, out_dir, manifest)
    elif subcommand == "eval":
        cmd_eval(config, out_dir, manifest)
    elif subcommand == "profile":
        cmd_profile(config, out_dir, manifest)
    elif subcommand == "bench":
        cmd_bench(config, out_dir, manifest)
    else:
        raise UsageError(f"unknown subcommand {subcommand!r}")

    path = write_manifest(out_dir, manifest)
    print_success(SUCCESS_MESSAGES["manifest_saved"].format(path=path))
    for artifact in list_artifacts(out_dir):
        logger.debug("%s %d bytes (%s old)", artifact["name"], artifact["size"], describe_age(artifact["mtime"]))
    return manifest


def main(argv=None):
    """Parse arguments, run, and map failures to exit codes."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print_error(f"error[{e.category}]: {e}")
        return EXIT_CODES["usage"]

    configure_logging(args.verbose)
    set_quiet(args.quiet)
    try:
        run(args.subcommand, args.config, args.overrides, args.out)
    except LabError as e:
        print_error(f"error[{e.category}]: {str(e).splitlines()[0] if str(e) else type(e).__name__}")
        return EXIT_CODES.get(e.category, EXIT_CODES["runtime"])
    except KeyboardInterrupt:
        print_warning("Interrupted")
        return EXIT_CODES["runtime"]
    except (OSError, MemoryError) as e:
        print_error(f"error[runtime]: {e}")
        return EXIT_CODES["runtime"]
    except Exception as e:
        logger.debug("unhandled failure", exc_info=True)
        print_error(f"error[runtime]: {type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}")
        return EXIT_CODES["runtime"]
    return EXIT_CODES["ok"]


if __name__ == "__main__":
    sys.exit(main())
