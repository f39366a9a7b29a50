"""Command-line orchestration.

``coa <stage> --config <path|@fixture> --run-dir <dir>`` runs one pipeline
stage. Stage progress lives in ``run.json``; a stage already marked done is
skipped unless ``--force`` is given. Exit codes: 0 success, 1 partial
failure, 2 configuration or prerequisite error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from coa import reporting
from coa.chain import ChainExample, artifact_paths, ensure_writable, run_batch
from coa.config import RunConfig, build_models, load_config, sweep_variants, validate
from coa.core import atomic_write_json, atomic_write_jsonl, dumps_json, load_image, read_jsonl
from coa.dataprep import ExampleRecord, list_images, prepare_examples, read_caption_pool
from coa.errors import CoAError, ConfigError
from coa.evaluation import EvalItem, ensemble_clip_score, evaluate_items, noise_sensitivity_sweep
from coa.textutil import derive_seed

log = logging.getLogger("coa")

STAGES = ("prepare", "attack", "evaluate", "report", "noise-sweep")
REQUIRES = {"prepare": None, "attack": "prepare", "evaluate": "attack", "report": "evaluate",
            "noise-sweep": "attack"}
DOWNSTREAM = {
    "prepare": ("attack", "evaluate", "report", "noise-sweep"),
    "attack": ("evaluate", "report", "noise-sweep"),
    "evaluate": ("report",),
    "noise-sweep": ("report",),
    "report": (),
}
OK, PARTIAL, INVALID = 0, 1, 2


class PrerequisiteError(CoAError):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _comparable(snapshot: dict) -> dict:
    # worker count never changes outputs, so it may differ between invocations
    return {k: v for k, v in snapshot.items() if k != "workers"}


class RunState:
    """The ``run.json`` manifest: config snapshot, per-stage status, timestamps."""

    def __init__(self, run_dir: Path, data: dict):
        self.run_dir = run_dir
        self.data = data

    @property
    def path(self) -> Path:
        return self.run_dir / "run.json"

    @classmethod
    def open(cls, run_dir: Path, cfg: RunConfig, force: bool) -> "RunState":
        snapshot = cfg.snapshot()
        path = run_dir / "run.json"
        if path.exists():
            data = reporting.load_json(path)
            if _comparable(data["config_snapshot"]) != _comparable(snapshot):
                if not force:
                    raise ConfigError(
                        f"run-dir: {run_dir} was started with a different configuration; "
                        "use a new --run-dir or pass --force to restart it")
                data = None
            if data is not None:
                return cls(run_dir, data)
        state = cls(run_dir, {
            "run_id": cfg.run_id,
            "config_snapshot": snapshot,
            "stage_statuses": {s: "pending" for s in STAGES},
            "timestamps": {"created": _now()},
        })
        state.save()
        return state

    def status(self, stage: str) -> str:
        return self.data["stage_statuses"][stage]

    def started(self, stage: str) -> None:
        self.data["timestamps"][f"{stage}_started"] = _now()
        self.save()

    def finished(self, stage: str, status: str) -> None:
        """Record the outcome; later stages built on the old outputs go back to pending."""
        self.data["stage_statuses"][stage] = status
        self.data["timestamps"][f"{stage}_finished"] = _now()
        for later in DOWNSTREAM[stage]:
            self.data["stage_statuses"][later] = "pending"
        self.save()

    def save(self) -> None:
        atomic_write_json(self.path, self.data)


# --- stages -------------------------------------------------------------------


def _records(run_dir: Path) -> list[ExampleRecord]:
    path = run_dir / "manifest.jsonl"
    if not path.exists():
        raise PrerequisiteError(f"{path} not found: run `coa prepare` first")
    return [ExampleRecord.from_dict(d) for d in read_jsonl(path)]


def stage_prepare(cfg: RunConfig, run_dir: Path) -> int:
    data = cfg.data
    images = list_images(cfg.path(data["images"]))
    pool = read_caption_pool(cfg.path(data["caption_pool"]))
    cache_dir = cfg.path(data["cache_dir"]) if data.get("cache_dir") else run_dir / "cache"
    manifest = prepare_examples(images, pool, build_models(cfg, log_dir=run_dir / "logs", include_eval=False),
                                cache_dir, cfg.seed, out_dir=run_dir, workers=cfg.workers)
    atomic_write_jsonl(run_dir / "manifest.jsonl", [r.to_dict() for r in manifest.records])
    atomic_write_json(run_dir / "prepare_failures.json", manifest.failures)
    print(f"prepare: {len(manifest)} records, {len(manifest.failures)} failures")
    return PARTIAL if manifest.failures else OK


def _examples(records: Sequence[ExampleRecord], run_dir: Path) -> list[ChainExample]:
    return [ChainExample(r.id, r.resolve(run_dir, "clean_image_path"), r.clean_text,
                         r.resolve(run_dir, "target_image_path"), r.target_text_refined,
                         clean_ref=r.clean_image_path, target_ref=r.target_image_path) for r in records]


def stage_attack(cfg: RunConfig, run_dir: Path) -> int:
    examples = _examples(_records(run_dir), run_dir)
    models = build_models(cfg, log_dir=run_dir / "logs", include_eval=False)
    summary = {"main": run_batch(examples, cfg.attack_config(), models, run_dir, workers=cfg.workers).to_dict()}
    for label, overrides in sweep_variants(cfg):
        out = run_dir / "sweep" / label
        batch = run_batch(examples, cfg.attack_config(overrides), models, out, workers=cfg.workers)
        summary[label] = {"overrides": overrides, **batch.to_dict()}
    atomic_write_json(run_dir / "attack_summary.json", summary)
    failed = sum(s["failed"] for s in summary.values())
    print(f"attack: {summary['main']['succeeded']} succeeded, {summary['main']['failed']} failed"
          + (f"; {len(summary) - 1} sweep variants" if len(summary) > 1 else ""))
    return PARTIAL if failed else OK


def _adv_items(records, art_dir: Path, target_field: str) -> tuple[list[EvalItem], list[str]]:
    items, missing = [], []
    for r in records:
        paths = artifact_paths(art_dir, r.id)
        meta = reporting.load_json(paths["meta"]) if paths["meta"].exists() else {}
        if meta.get("status") != "ok" or not paths["png"].exists():
            missing.append(r.id)
            continue
        items.append(EvalItem(r.id, load_image(paths["png"]), r.clean_text, getattr(r, target_field)))
    return items, missing


def stage_evaluate(cfg: RunConfig, run_dir: Path) -> int:
    records = _records(run_dir)
    ev = cfg.eval
    models = build_models(cfg, log_dir=run_dir / "logs")
    field, prompt = ev["target_field"], ev["prompt"]

    def score(items):
        return evaluate_items(items, models.victim, models.judge, models.eval_encoders,
                              prompt=prompt, workers=cfg.workers).to_dict()

    items, missing = _adv_items(records, run_dir, field)
    report = {
        "encoder_names": [e.name for e in models.eval_encoders],
        "target_field": field,
        "prompt": prompt,
        "missing": missing,
        "coa": score(items),
        "clean_baseline": None,
        "sweep": {},
    }
    if ev["clean_baseline"]:
        clean = [EvalItem(r.id, load_image(r.resolve(run_dir, "clean_image_path")), r.clean_text,
                          getattr(r, field)) for r in records]
        report["clean_baseline"] = score(clean)
    for label, overrides in sweep_variants(cfg):
        sweep_items, sweep_missing = _adv_items(records, run_dir / "sweep" / label, field)
        report["sweep"][label] = {"overrides": overrides, "missing": sweep_missing, "report": score(sweep_items)}

    atomic_write_json(run_dir / "report.json", report)
    rows = ([("Clean image", report["clean_baseline"])] if report["clean_baseline"] else []) \
        + [("CoA", report["coa"])]
    reporting.write_tables(run_dir / "tables", rows, report["encoder_names"])
    coa = report["coa"]
    print(f"evaluate: {coa['n_scored']} scored, ensemble {coa['ensemble_mean']}, "
          f"target {coa['target_asr']}, fool {coa['fool_rate']}, missing {len(missing)}")
    partial = missing or coa["n_victim_errors"] or coa["n_judge_errors"]
    return PARTIAL if partial else OK


def stage_noise_sweep(cfg: RunConfig, run_dir: Path) -> int:
    noise = cfg.eval["noise"]
    stds = [float(s) for s in noise.get("stds", [])]
    if not stds:
        raise ConfigError("eval.noise.stds: empty; list the noise levels to sweep")
    records = _records(run_dir)
    models = build_models(cfg, log_dir=run_dir / "logs")
    items, missing = _adv_items(records, run_dir, cfg.eval["target_field"])
    per_example = {}
    for item in items:
        def metric(response: str, target=item.target_text) -> float:
            ens = ensemble_clip_score(response, target, models.eval_encoders).ensemble
            if ens is None:
                raise CoAError("no encoder produced a score")
            return ens

        curve = noise_sensitivity_sweep(item.image, stds, models.victim, metric,
                                        n_seeds=int(noise.get("seeds", 20)),
                                        seed=derive_seed(cfg.seed, item.id, "noise"), prompt=cfg.eval["prompt"])
        per_example[item.id] = [{"std": p.std, "mean": p.mean, "n_missing": p.n_missing} for p in curve]

    curve = []
    for k, std in enumerate(stds):
        means = [pts[k]["mean"] for pts in per_example.values() if pts[k]["mean"] is not None]
        curve.append({"std": std, "mean": sum(means) / len(means) if means else None, "n_examples": len(means)})
    atomic_write_json(run_dir / "noise_sweep.json", {"stds": stds, "seeds": int(noise.get("seeds", 20)),
                                                     "curve": curve, "per_example": per_example,
                                                     "missing": missing})
    print("noise-sweep: " + ", ".join(f"std={c['std']:g}: {c['mean']}" for c in curve))
    return PARTIAL if missing else OK


def eps_points(report: dict) -> list[tuple[float, float]]:
    """(eps, ensemble mean) for every sweep variant that overrides only ``attack.eps``."""
    pts = []
    for entry in report.get("sweep", {}).values():
        if set(entry["overrides"]) == {"attack.eps"} and entry["report"]["ensemble_mean"] is not None:
            pts.append((float(entry["overrides"]["attack.eps"]), entry["report"]["ensemble_mean"]))
    return pts


def stage_report(cfg: RunConfig, run_dir: Path) -> int:
    report_path = run_dir / "report.json"
    if not report_path.exists():
        raise PrerequisiteError(f"{report_path} not found: run `coa evaluate` first")
    report = reporting.load_json(report_path)
    plots, notes = run_dir / "plots", []
    figures = {"Loss vs PGD step": reporting.plot_loss_vs_step(run_dir / "traces", plots)}
    if figures["Loss vs PGD step"] is None:
        notes.append("loss-vs-step plot skipped: no traces found")

    pts = eps_points(report)
    figures["Ensemble score vs eps"] = reporting.plot_score_vs_eps(pts, plots)
    if not pts:
        notes.append("score-vs-eps plot skipped: the config sweep has no attack.eps-only variants")

    noise_path = run_dir / "noise_sweep.json"
    curve = reporting.load_json(noise_path)["curve"] if noise_path.exists() else []
    figures["Noise sensitivity"] = reporting.plot_noise_curve(curve, plots)
    if figures["Noise sensitivity"] is None:
        notes.append("noise-sensitivity plot skipped: run `coa noise-sweep` first")

    rows = ([("Clean image", report["clean_baseline"])] if report.get("clean_baseline") else []) \
        + [("CoA", report["coa"])]
    _, md = reporting.render_tables(rows, report["encoder_names"])
    reporting.write_summary(run_dir / "summary.md", table_md=md, figures=figures, notes=notes, report=report)
    for note in notes:
        print(f"report: {note}")
    print(f"report: wrote {sum(f is not None for f in figures.values())} plots and {run_dir / 'summary.md'}")
    return OK


RUNNERS = {"prepare": stage_prepare, "attack": stage_attack, "evaluate": stage_evaluate,
           "report": stage_report, "noise-sweep": stage_noise_sweep}
VALIDATE_FOR = {"prepare": ("prepare",), "attack": (), "evaluate": ("evaluate",), "report": (),
                "noise-sweep": ("evaluate",)}


# --- entry point ----------------------------------------------------------------


def _setup_logging(run_dir: Path, verbose: bool) -> logging.Handler:
    (run_dir / "logs").mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(run_dir / "logs" / "coa.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.DEBUG if verbose else logging.INFO)
    return handler


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coa", description="Chain-of-Attack pipeline runner")
    parser.add_argument("stage", choices=STAGES)
    parser.add_argument("--config", required=True, help="config JSON path, or @fixture for the bundled toy run")
    parser.add_argument("--run-dir", required=True, type=Path)
    parser.add_argument("--seed", type=int, default=None, help="override the config's global seed")
    parser.add_argument("--workers", type=int, default=None, help="override the config's worker count")
    parser.add_argument("--force", action="store_true", help="rerun the stage even if it is already done")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(stage: str, config: str, run_dir: Path, *, seed: Optional[int] = None, workers: Optional[int] = None,
        force: bool = False, verbose: bool = False) -> int:
    try:
        cfg = load_config(config, seed=seed, workers=workers)
        validate(cfg, VALIDATE_FOR[stage])
        run_dir = ensure_writable(run_dir)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return INVALID

    handler = _setup_logging(run_dir, verbose)
    try:
        state = RunState.open(run_dir, cfg, force)
        needed = REQUIRES[stage]
        if needed and state.status(needed) == "pending":
            raise PrerequisiteError(f"stage {stage!r} needs {needed!r}: run `coa {needed}` first")
        if state.status(stage) == "done" and not force:
            print(f"{stage}: already done (use --force to rerun)")
            return OK
        state.started(stage)
        log.info("stage %s started in %s", stage, run_dir)
        code = RUNNERS[stage](cfg, run_dir)
        state.finished(stage, "done" if code == OK else "failed")
        log.info("stage %s finished with exit code %d", stage, code)
        return code
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return INVALID
    except PrerequisiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return INVALID
    finally:
        log.removeHandler(handler)
        handler.close()


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return run(args.stage, args.config, args.run_dir, seed=args.seed, workers=args.workers,
               force=args.force, verbose=args.verbose)


if __name__ == "__main__":
    sys.exit(main())
