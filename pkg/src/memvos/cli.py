"""Command-line entry point.

One executable, nine subcommands: generate / train / finetune / eval /
ablate / oracle / attributes / stats / pipeline. Every run takes an output
directory, echoes its effective configuration to
`<out>/effective_config.json` (defaults < --config file < command-line
flags/--set overrides, unknown keys rejected), and appends a timestamp-free
`run.log`. Wall-clock measurements go to separate `*timing*.json` files so
the primary outputs are byte-identical across re-runs with the same seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import (DatasetManifest, ManifestEntry, dataset_stats,
                   load_sequence, manifest_path, save_mask, frame_name)
from .errors import ConfigError, MemvosError
from .evaluation import (ablation_suite, classify_attributes,
                         evaluate_dataset, frame_detail_rows, oracle_suite,
                         report_to_dict, timing_to_dict)
from .model import ModelConfig, SegModel
from .modes import BankCombo, Box, OracleMode
from .pipeline import (IdentityPropagator, IdentitySegmenter, IdentityTracker,
                       ModelPropagator, run_pipeline)
from .synthgen import SUITE_SIZES, SynthSpec, generate, standard_suites
from .training import default_phase1, default_phase2, finetune, train


class RunLog:
    def __init__(self, out_dir: Path, echo: bool = True):
        self.path = out_dir / "run.log"
        self.echo = echo
        self._fh = open(self.path, "a")

    def __call__(self, msg: str) -> None:
        self._fh.write(msg + "\n")
        self._fh.flush()
        if self.echo:
            print(msg, file=sys.stderr)

    def close(self):
        self._fh.close()


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_config(defaults: dict, config_file: str | None,
                 cli_values: dict, sets: list[str]) -> dict:
    """defaults < config file < explicit CLI values < --set overrides;
    unknown keys are rejected."""
    cfg = dict(defaults)

    def apply(source: dict, origin: str):
        for k, v in source.items():
            if k == "subcommand":
                continue
            if k not in defaults:
                raise ConfigError(f"unknown config key {k!r} (from {origin}); "
                                  f"valid keys: {sorted(defaults)}")
            cfg[k] = v

    if config_file:
        try:
            apply(json.loads(Path(config_file).read_text()), config_file)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_file}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}")
    apply({k: v for k, v in cli_values.items() if v is not None}, "flags")
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        apply({k.strip(): _parse_value(v.strip())}, "--set")
    return cfg


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _echo_config(out: Path, subcommand: str, cfg: dict) -> None:
    _write_json(out / "effective_config.json",
                {"subcommand": subcommand, **cfg})


def _load_records(root: Path, manifest: DatasetManifest):
    recs = []
    for entry in manifest.entries:
        recs.append(load_sequence(root, entry.seq_id,
                                  attributes=entry.attributes))
    return recs


def _root_of_manifest(manifest_file: Path) -> Path:
    return manifest_file.parent.parent


# ---------------------------------------------------------------------------
# subcommands

GENERATE_DEFAULTS = {"suites": list(SUITE_SIZES), "spec": None, "seed": 0,
                     "out": None}


def cmd_generate(cfg: dict, log) -> int:
    out = Path(cfg["out"])
    if cfg["spec"]:
        spec = SynthSpec.from_json(Path(cfg["spec"]).read_text())
        rec = generate(spec, root=out)
        log(f"generated {spec.name}: {rec.num_frames} frames, "
            f"attributes {sorted(rec.attributes)}")
        manifest = DatasetManifest("valid", [ManifestEntry(
            rec.seq_id, len(rec.object_ids), rec.attributes)])
        manifest.save(manifest_path(out, "valid"))
        return 0
    split_entries: dict[str, list[ManifestEntry]] = {"train": [], "valid": []}
    for suite_name, splits in standard_suites(cfg["suites"]).items():
        for split, specs in splits.items():
            entries = []
            for spec in specs:
                rec = generate(spec, root=out)
                entries.append(ManifestEntry(rec.seq_id, len(rec.object_ids),
                                             rec.attributes))
                log(f"generated {rec.seq_id}: {rec.num_frames} frames, "
                    f"attributes {sorted(rec.attributes)}")
            split_entries[split].extend(entries)
            per_suite = DatasetManifest(split, entries)
            per_suite.save(out / "manifests" / f"{suite_name}-{split}.json")
    for split, entries in split_entries.items():
        DatasetManifest(split, entries).save(manifest_path(out, split))
    log("dataset written")
    return 0


TRAIN_DEFAULTS = {
    "data": None, "out": None, "seed": 1,
    "manifest": "train",
    "model.channels": 32, "model.heads": 4, "model.matcher_layers": 3,
    "phase1.steps": 900, "phase1.learning_rate": 4e-4,
    "phase1.weight_decay": 0.03, "phase1.batch_size": 2,
    "phase1.clip_length": 3,
    "phase2.steps": 1400, "phase2.learning_rate": 2e-4,
    "phase2.weight_decay": 0.07, "phase2.batch_size": 2,
    "phase2.clip_length": 5,
}


def _train_history_rows(history) -> list[str]:
    rows = ["phase,step,loss,keep,lr"]
    rows += [f"{h['phase']},{h['step']},{h['loss']:.6f},{h['keep']:.4f},"
             f"{h['lr']:.6e}" for h in history]
    return rows


def cmd_train(cfg: dict, log) -> int:
    out = Path(cfg["out"])
    root = Path(cfg["data"])
    manifest = DatasetManifest.load(manifest_path(root, cfg["manifest"]))
    records = _load_records(root, manifest)
    log(f"training on {len(records)} sequences")
    model = SegModel(ModelConfig(channels=cfg["model.channels"],
                                 heads=cfg["model.heads"],
                                 matcher_layers=cfg["model.matcher_layers"]),
                     seed=cfg["seed"])
    p1 = default_phase1(steps=cfg["phase1.steps"],
                        learning_rate=cfg["phase1.learning_rate"],
                        weight_decay=cfg["phase1.weight_decay"],
                        batch_size=cfg["phase1.batch_size"],
                        clip_length=cfg["phase1.clip_length"],
                        seed=cfg["seed"] * 7 + 1)
    p2 = default_phase2(steps=cfg["phase2.steps"],
                        learning_rate=cfg["phase2.learning_rate"],
                        weight_decay=cfg["phase2.weight_decay"],
                        batch_size=cfg["phase2.batch_size"],
                        clip_length=cfg["phase2.clip_length"],
                        seed=cfg["seed"] * 7 + 2)
    model, history = train(model, records, p1, p2, log=log)
    model.save_checkpoint(out / "checkpoint.npz")
    (out / "train_log.csv").write_text(
        "\n".join(_train_history_rows(history)) + "\n")
    log("checkpoint written")
    return 0


FINETUNE_DEFAULTS = {"checkpoint": None, "data": None, "out": None,
                     "manifest": "train", "epochs": 2,
                     "learning_rate": 5e-4, "seed": 2}


def cmd_finetune(cfg: dict, log) -> int:
    out = Path(cfg["out"])
    model = SegModel.load_checkpoint(cfg["checkpoint"])
    root = Path(cfg["data"])
    manifest = DatasetManifest.load(manifest_path(root, cfg["manifest"]))
    records = _load_records(root, manifest)
    model, history = finetune(model, records, epochs=cfg["epochs"],
                              learning_rate=cfg["learning_rate"],
                              seed=cfg["seed"], log=log)
    model.save_checkpoint(out / "checkpoint.npz")
    (out / "train_log.csv").write_text(
        "\n".join(_train_history_rows(history)) + "\n")
    return 0


EVAL_DEFAULTS = {"manifest": None, "checkpoint": None, "out": None,
                 "oracle": "none", "banks": "rgl", "seed": 0, "workers": 1}


def _write_report(out: Path, name: str, report, manifest) -> None:
    _write_json(out / f"{name}.json", report_to_dict(report, manifest))
    _write_json(out / f"{name}_timing.json", timing_to_dict(report))
    (out / f"{name}_frames.csv").write_text(
        "\n".join(frame_detail_rows(report)) + "\n")


def cmd_eval(cfg: dict, log) -> int:
    out = Path(cfg["out"])
    manifest_file = Path(cfg["manifest"])
    manifest = DatasetManifest.load(manifest_file)
    model = SegModel.load_checkpoint(cfg["checkpoint"])
    report = evaluate_dataset(model, manifest, _root_of_manifest(manifest_file),
                              OracleMode.parse(cfg["oracle"]),
                              BankCombo.parse(cfg["banks"]),
                              workers=cfg["workers"])
    _write_report(out, "report", report, manifest)
    log(f"oracle={report.oracle} banks={report.banks} "
        f"J&F={report.jf:.4f} J={report.mean_j:.4f} F={report.mean_f:.4f}")
    return 0


ABLATE_DEFAULTS = {"manifest": None, "checkpoint": None, "out": None,
                   "seed": 0, "workers": 1}


def cmd_ablate(cfg: dict, log) -> int:
    out = Path(cfg["out"])
    manifest_file = Path(cfg["manifest"])
    manifest = DatasetManifest.load(manifest_file)
    model = SegModel.load_checkpoint(cfg["checkpoint"])
    reports = ablation_suite(model, manifest,
                             _root_of_manifest(manifest_file))
    table = []
    timing = {}
    for name, rep in reports.items():
        row = {"banks": name, "jf": rep.jf, "j": rep.mean_j, "f": rep.mean_f}
        table.append(row)
        timing[name] = timing_to_dict(rep)
        _write_report(out / "combos", name, rep, manifest)
        log(f"banks={name:3s} J&F={rep.jf:.4f} J={rep.mean_j:.4f} "
            f"F={rep.mean_f:.4f}")
    _write_json(out / "ablation.json", {"rows": table})
    _write_json(out / "ablation_timing.json", timing)
    return 0


ORACLE_DEFAULTS = {"manifest": None, "checkpoint": None, "out": None,
                   "banks": "rgl", "seed": 0, "workers": 1}


def cmd_oracle(cfg: dict, log) -> int:
    out = Path(cfg["out"])
    manifest_file = Path(cfg["manifest"])
    manifest = DatasetManifest.load(manifest_file)
    model = SegModel.load_checkpoint(cfg["checkpoint"])
    reports = oracle_suite(model, manifest, _root_of_manifest(manifest_file),
                           BankCombo.parse(cfg["banks"]))
    table = []
    timing = {}
    for name, rep in reports.items():
        table.append({"oracle": name, "jf": rep.jf, "j": rep.mean_j,
                      "f": rep.mean_f})
        timing[name] = timing_to_dict(rep)
        safe = name.replace("+", "_")
        _write_report(out / "modes", safe, rep, manifest)
        log(f"oracle={name:8s} J&F={rep.jf:.4f} J={rep.mean_j:.4f} "
            f"F={rep.mean_f:.4f}")
    _write_json(out / "oracle.json", {"rows": table})
    _write_json(out / "oracle_timing.json", timing)
    return 0


ATTRIBUTES_DEFAULTS = {"manifest": None, "out": None, "report": None,
                       "seed": 0}


def cmd_attributes(cfg: dict, log) -> int:
    out = Path(cfg["out"])
    manifest_file = Path(cfg["manifest"])
    manifest = DatasetManifest.load(manifest_file)
    root = _root_of_manifest(manifest_file)
    per_seq = {}
    for entry in manifest.entries:
        rec = load_sequence(root, entry.seq_id, attributes=entry.attributes)
        per_seq[entry.seq_id] = {
            "computed_quantitative": sorted(classify_attributes(rec)),
            "manifest": sorted(entry.attributes),
        }
        log(f"{entry.seq_id}: {per_seq[entry.seq_id]['computed_quantitative']}")
    _write_json(out / "attributes.json", per_seq)
    if cfg["report"]:
        payload = json.loads(Path(cfg["report"]).read_text())
        seq_j = {s["id"]: s["mean_j"] for s in payload["sequences"]}
        rows = {}
        from .data import ATTRIBUTES
        for attr in ATTRIBUTES:
            vals = [seq_j[e.seq_id] for e in manifest.entries
                    if attr in e.attributes and e.seq_id in seq_j]
            rows[attr] = float(np.mean(vals)) if vals else None
        _write_json(out / "breakdown.json", rows)
    return 0


STATS_DEFAULTS = {"manifest": None, "out": None, "seed": 0}


def cmd_stats(cfg: dict, log) -> int:
    out = Path(cfg["out"])
    manifest_file = Path(cfg["manifest"])
    manifest = DatasetManifest.load(manifest_file)
    report = dataset_stats(manifest, _root_of_manifest(manifest_file))
    _write_json(out / "stats.json", report.to_dict())
    log(f"videos={report.video_count} frames={report.total_frames} "
        f"annotations={report.total_annotations} "
        f"mean_duration_min={report.mean_duration_min:.3f}")
    return 0


PIPELINE_DEFAULTS = {"manifest": None, "sequence": None, "out": None,
                     "propagator": "identity", "checkpoint": None, "seed": 0}


def cmd_pipeline(cfg: dict, log) -> int:
    out = Path(cfg["out"])
    manifest_file = Path(cfg["manifest"])
    manifest = DatasetManifest.load(manifest_file)
    root = _root_of_manifest(manifest_file)
    seq_ids = ([cfg["sequence"]] if cfg["sequence"]
               else [e.seq_id for e in manifest.entries])
    audits = {}
    for seq_id in seq_ids:
        rec = load_sequence(root, seq_id)
        boxes = {oid: Box.from_mask(rec.groundtruth[0] == oid)
                 for oid in rec.object_ids}
        segmenters = {o: IdentitySegmenter(rec) for o in rec.object_ids}
        trackers = {o: IdentityTracker(rec, o) for o in rec.object_ids}
        if cfg["propagator"] == "model":
            if not cfg["checkpoint"]:
                raise ConfigError("--propagator model needs --checkpoint")
            model = SegModel.load_checkpoint(cfg["checkpoint"])
            propagators = {o: ModelPropagator(model) for o in rec.object_ids}
        elif cfg["propagator"] == "identity":
            propagators = {o: IdentityPropagator(rec, o)
                           for o in rec.object_ids}
        else:
            raise ConfigError(f"unknown propagator {cfg['propagator']!r}")
        res = run_pipeline(rec, boxes, segmenters, trackers, propagators,
                           workdir=out / seq_id)
        for t, m in enumerate(res.label_masks):
            save_mask(m, out / seq_id / "annotations" / frame_name(t))
        audits[seq_id] = {"audit_iou": res.audit_iou,
                          "flags_round1": len(res.queue_round1.flags),
                          "flags_round2": len(res.queue_round2.flags)}
        log(f"{seq_id}: audit IoU "
            f"{res.audit_iou if res.audit_iou is not None else 'n/a'}")
    _write_json(out / "pipeline_audit.json", audits)
    return 0


# ---------------------------------------------------------------------------

_SUBCOMMANDS = {
    "generate": (GENERATE_DEFAULTS, cmd_generate),
    "train": (TRAIN_DEFAULTS, cmd_train),
    "finetune": (FINETUNE_DEFAULTS, cmd_finetune),
    "eval": (EVAL_DEFAULTS, cmd_eval),
    "ablate": (ABLATE_DEFAULTS, cmd_ablate),
    "oracle": (ORACLE_DEFAULTS, cmd_oracle),
    "attributes": (ATTRIBUTES_DEFAULTS, cmd_attributes),
    "stats": (STATS_DEFAULTS, cmd_stats),
    "pipeline": (PIPELINE_DEFAULTS, cmd_pipeline),
}


def _add_common(p: argparse.ArgumentParser, defaults: dict) -> None:
    p.add_argument("--out", required=False, help="output directory")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", dest="sets", action="append", default=[],
                   metavar="KEY=VALUE", help="override one config key")
    if "seed" in defaults:
        p.add_argument("--seed", type=int)
    if "workers" in defaults:
        p.add_argument("--workers", type=int,
                       help="parallel sequence workers (1 = deterministic)")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="memvos",
        description="Long-term video object segmentation toolkit: synthetic "
                    "data, training, J/F evaluation with oracle and "
                    "memory-bank ablations, and the annotation pipeline.")
    sub = ap.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("generate", help="render the synthetic suites")
    p.add_argument("--suites", nargs="+", choices=list(SUITE_SIZES))
    p.add_argument("--spec", help="render a single spec JSON instead")
    _add_common(p, GENERATE_DEFAULTS)

    p = sub.add_parser("train", help="two-phase training")
    p.add_argument("--data", help="dataset root from `generate`")
    p.add_argument("--manifest", help="split name (default train)")
    _add_common(p, TRAIN_DEFAULTS)

    p = sub.add_parser("finetune", help="continue training a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    _add_common(p, FINETUNE_DEFAULTS)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--manifest", help="manifest JSON path")
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", choices=[m.value for m in OracleMode])
    p.add_argument("--banks", help="subset of 'rgl'")
    _add_common(p, EVAL_DEFAULTS)

    p = sub.add_parser("ablate", help="all 7 memory-bank combinations")
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    _add_common(p, ABLATE_DEFAULTS)

    p = sub.add_parser("oracle", help="all 4 oracle modes")
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--banks")
    _add_common(p, ORACLE_DEFAULTS)

    p = sub.add_parser("attributes", help="classify + attribute breakdown")
    p.add_argument("--manifest")
    p.add_argument("--report", help="report.json from `eval` for breakdown")
    _add_common(p, ATTRIBUTES_DEFAULTS)

    p = sub.add_parser("stats", help="dataset statistics")
    p.add_argument("--manifest")
    _add_common(p, STATS_DEFAULTS)

    p = sub.add_parser("pipeline", help="semi-automatic annotation pipeline")
    p.add_argument("--manifest")
    p.add_argument("--sequence", help="run one sequence only")
    p.add_argument("--propagator", choices=["identity", "model"])
    p.add_argument("--checkpoint")
    _add_common(p, PIPELINE_DEFAULTS)
    return ap


def dispatch(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    defaults, runner = _SUBCOMMANDS[args.subcommand]
    cli_values = {k: v for k, v in vars(args).items()
                  if k not in ("subcommand", "config", "sets")}
    try:
        cfg = build_config(defaults, args.config, cli_values, args.sets)
        if not cfg.get("out"):
            raise ConfigError("--out is required")
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        _echo_config(out, args.subcommand, cfg)
        log = RunLog(out)
        try:
            return runner(cfg, log)
        finally:
            log.close()
    except MemvosError as e:
        print(f"error[{type(e).__name__}]: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # diagnostics, nonzero exit
        import traceback
        traceback.print_exc()
        print(f"error[unexpected:{type(e).__name__}]: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())
