"""One function per subcommand; :func:`run_command` maps errors to exit codes."""
import csv
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from omegaconf import DictConfig, OmegaConf

from lingrid.artist import heatmap_overlay
from lingrid.association import MODES
from lingrid.config import (
    ARCHITECTURE_KEYS,
    RunManifest,
    merge_strict,
    read_config_file,
    validate_config,
    write_config_file,
)
from lingrid.datagen import (
    DatasetReader,
    GenParams,
    dataset_hash,
    gen_dataset,
    load_dataset,
    read_ppm,
    save_dataset,
    summarize,
)
from lingrid.errors import ConfigError, LinGridError, VerificationError
from lingrid.evalkit import (
    METRIC_COLUMNS,
    Metrics,
    attention_heatmap,
    chance_metrics,
    evaluate_model,
    format_metrics,
    grounding_report,
    text_retrieval_report,
    text_to_image_retrieve,
    write_heatmap,
    write_metrics_csv,
)
from lingrid.gradcheck import run_suite
from lingrid.textpipe import Lexicon, encode, extract_phrases, format_phrases, tokenize
from lingrid.trainer import CHECKPOINT_NAME, Trainer, load_model

PathT = os.PathLike

logger = logging.getLogger(__name__)


def cmd_gen_data(cfg: DictConfig) -> Dict[str, int]:
    params = GenParams.from_config(cfg)
    out = Path(cfg.data_dir)
    if out.exists() and any(out.iterdir()) and not cfg.force:
        raise ConfigError(f"{out} exists and is not empty, use force=true to overwrite")
    dataset = gen_dataset(params)
    save_dataset(dataset, out, force=cfg.force)
    summary = summarize(dataset)
    print(
        f"wrote {out}: {summary['train_ids']} train ids / {summary['train_tuples']} tuples, "
        f"{summary['test_ids']} test ids / {summary['test_tuples']} tuples, "
        f"vocabulary {summary['vocab_size']} words"
    )
    print(f"content hash {dataset_hash(out)}")
    return summary


def train_and_evaluate(
    cfg: DictConfig, run_dir: PathT, mode: Optional[str] = None, seed: Optional[int] = None
) -> RunManifest:
    start = time.perf_counter()
    run_dir = Path(run_dir)
    dataset = load_dataset(cfg.data_dir)
    trainer = Trainer(cfg, dataset, run_dir, mode=mode, seed=seed)

    run_cfg = OmegaConf.merge(
        cfg, {"mode": trainer.mode, "seed": trainer.seed, "run_dir": str(run_dir)}
    )
    run_dir.mkdir(parents=True, exist_ok=True)
    write_config_file(run_cfg, run_dir / "config.cfg")

    trainer.train()
    metrics = evaluate_model(trainer.model, DatasetReader(dataset))
    write_metrics_csv(run_dir / "metrics.csv", [metrics.as_row(trainer.mode, trainer.seed)])

    manifest = RunManifest(
        config=OmegaConf.to_container(run_cfg, resolve=True),
        dataset_hash=dataset_hash(cfg.data_dir),
        metrics=metrics.as_row(trainer.mode, trainer.seed),
        wall_clock_s=time.perf_counter() - start,
        seed=trainer.seed,
        mode=trainer.mode,
    )
    manifest.save(run_dir / "manifest.json")
    logger.info(f"{trainer.mode} seed {trainer.seed}: {format_metrics(metrics)}")
    return manifest


def cmd_train(cfg: DictConfig) -> RunManifest:
    manifest = train_and_evaluate(cfg, cfg.run_dir)
    print(f"checkpoint {Path(cfg.run_dir) / CHECKPOINT_NAME}")
    print("  ".join(f"{k} {100 * manifest.metrics[k]:.2f}" for k in METRIC_COLUMNS[2:]))
    return manifest


def checkpoint_path(cfg: DictConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.run_dir) / CHECKPOINT_NAME


def model_config(cfg: DictConfig, checkpoint: Path) -> DictConfig:
    """Take the architecture keys from the run's own config.cfg when it is there."""
    saved = checkpoint.parent / "config.cfg"
    if not saved.is_file():
        return cfg
    run_cfg = read_config_file(saved)
    arch = {k: run_cfg[k] for k in ARCHITECTURE_KEYS}
    return merge_strict(cfg, OmegaConf.create(arch))


def restore(cfg: DictConfig):
    checkpoint = checkpoint_path(cfg)
    dataset = load_dataset(cfg.data_dir)
    model_cfg = model_config(cfg, checkpoint)
    model = load_model(model_cfg, dataset, checkpoint)
    return model, dataset


def cmd_eval(cfg: DictConfig) -> Metrics:
    model, dataset = restore(cfg)
    reader = DatasetReader(dataset)
    metrics = evaluate_model(model, reader)
    chance = chance_metrics(reader.labels("query"), reader.labels("gallery"), seed=cfg.seed)

    out = checkpoint_path(cfg).parent / "eval_metrics.csv"
    write_metrics_csv(out, [metrics.as_row(model.mode, cfg.seed)])
    print(f"{model.mode:<10}{format_metrics(metrics)}")
    print(f"{'chance':<10}{format_metrics(chance)}")
    print(f"metrics written to {out}")
    return metrics


# ablation and sweep


def _run_variant(job: Tuple[Dict, str, str, int, Dict, str]) -> Dict:
    container, run_dir, mode, seed, overrides, variant = job
    cfg = merge_strict(OmegaConf.create(container), OmegaConf.create(overrides))
    try:
        manifest = train_and_evaluate(cfg, run_dir, mode=mode, seed=seed)
        return {**manifest.metrics, "variant": variant}
    except LinGridError as e:
        logger.error(f"{variant} seed {seed} failed: {e}")
        return {"variant": variant, "seed": seed, "failed": str(e)}


def run_matrix(cfg: DictConfig, jobs: List[Tuple]) -> List[Dict]:
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(_run_variant, jobs))
    return [_run_variant(job) for job in jobs]


def summarize_runs(rows: Sequence[Dict], variants: Sequence[str]) -> List[Dict]:
    summary = []
    for variant in variants:
        runs = [r for r in rows if r["variant"] == variant]
        if any("failed" in r for r in runs):
            summary.append({"variant": variant, "runs": len(runs), "failed": True})
            continue
        entry = {"variant": variant, "runs": len(runs)}
        for key in METRIC_COLUMNS[2:]:
            values = np.array([r[key] for r in runs]) * 100
            entry[key] = (float(values.mean()), float(values.std()))
        summary.append(entry)
    return summary


def format_summary(summary: Sequence[Dict]) -> List[str]:
    header = f"{'variant':<14}" + "".join(f"{k:>16}" for k in METRIC_COLUMNS[2:])
    lines = [header, "-" * len(header)]
    for entry in summary:
        if entry.get("failed"):
            lines.append(f"{entry['variant']:<14}{'FAILED':>16}")
            continue
        cells = "".join(
            f"{f'{m:.2f} ± {s:.2f}':>16}" for m, s in (entry[k] for k in METRIC_COLUMNS[2:])
        )
        lines.append(f"{entry['variant']:<14}{cells}")
    return lines


def write_matrix(out_dir: Path, name: str, rows: Sequence[Dict], summary: Sequence[Dict]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out_dir / f"{name}_raw.csv", [r for r in rows if "failed" not in r])
    with open(out_dir / f"{name}_summary.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["variant", "runs"] + [f"{k}_{s}" for k in METRIC_COLUMNS[2:] for s in ("mean", "sd")]
        )
        for entry in summary:
            if entry.get("failed"):
                writer.writerow([entry["variant"], entry["runs"]] + ["FAILED"] * 8)
                continue
            cells = [f"{v:.4f}" for k in METRIC_COLUMNS[2:] for v in entry[k]]
            writer.writerow([entry["variant"], entry["runs"]] + cells)


def _finish_matrix(cfg: DictConfig, name: str, rows: List[Dict], variants: List[str]) -> int:
    summary = summarize_runs(rows, variants)
    write_matrix(Path(cfg.run_dir), name, rows, summary)
    for line in format_summary(summary):
        print(line)
    failed = [r for r in rows if "failed" in r]
    if failed:
        raise VerificationError(f"{len(failed)} of {len(rows)} runs failed")
    return len(rows)


def cmd_ablate(cfg: DictConfig) -> int:
    modes = [m for m in MODES if m in cfg.modes]
    container = OmegaConf.to_container(cfg, resolve=True)
    jobs = [
        (container, str(Path(cfg.run_dir) / f"{mode}_s{seed}"), mode, seed, {}, mode)
        for mode in modes
        for seed in cfg.seeds
    ]
    return _finish_matrix(cfg, "ablation", run_matrix(cfg, jobs), modes)


def cmd_sweep(cfg: DictConfig) -> int:
    container = OmegaConf.to_container(cfg, resolve=True)
    variants, jobs = [], []
    for value in cfg.lambda_t_values:
        variant = f"lambda_t={value:g}"
        variants.append(variant)
        for seed in cfg.seeds:
            run_dir = str(Path(cfg.run_dir) / f"lt{value:g}_s{seed}")
            overrides = {"lambda_t": float(value)}
            jobs.append((container, run_dir, cfg.sweep_mode, seed, overrides, variant))
    return _finish_matrix(cfg, "sweep", run_matrix(cfg, jobs), variants)


def cmd_gradcheck(cfg: DictConfig) -> int:
    report = run_suite(seed=cfg.seed)
    for line in report.lines():
        print(line)
    worst = max(report.losses.values())
    print(f"worst loss error {worst:.3e}, {report.seconds:.1f}s")
    if not report.passed:
        raise VerificationError(f"gradient check failed: {', '.join(report.failures)}")
    return 0


def cmd_retrieve(cfg: DictConfig) -> Optional[List[Tuple[int, float]]]:
    model, dataset = restore(cfg)
    if not cfg.text:
        report = text_retrieval_report(model, dataset)
        print(
            f"text->image top-1 identity accuracy {100 * report.top1_accuracy:.2f} "
            f"over {report.queries} descriptions (chance {100 * report.chance:.2f})"
        )
        return None

    gallery = dataset.gallery
    images = np.stack([dataset.image(t) for t in gallery])
    sequence = encode(tokenize(cfg.text), dataset.vocab)
    order, scores = text_to_image_retrieve(sequence, images, model)
    listing = []
    for rank, (i, score) in enumerate(zip(order[: cfg.top_k], scores), start=1):
        item = gallery[int(i)]
        print(f"{rank}\t{score:.4f}\t{item.image_file}\tperson {item.identity}")
        listing.append((int(i), float(score)))
    return listing


def cmd_heatmap(cfg: DictConfig) -> List[Path]:
    model, dataset = restore(cfg)
    out_dir = checkpoint_path(cfg).parent
    if not (cfg.image and cfg.phrase):
        report = grounding_report(model, dataset)
        print(
            f"{100 * report.above_threshold:.1f}% of {report.phrases} shirt phrases put "
            f">= {report.threshold:.0%} of attention on the torso rows "
            f"(mean {report.mean_mass:.3f}, chance {report.chance:.3f})"
        )
        return []

    image = read_ppm(cfg.image)
    heatmap = attention_heatmap(image, encode(tokenize(cfg.phrase), dataset.vocab), model)
    prefix = Path(cfg.heatmap_out) if cfg.heatmap_out else out_dir / "heatmap"
    written = write_heatmap(heatmap, prefix, cfg.phrase)
    if cfg.plot:
        figure = prefix.with_suffix(".png")
        heatmap_overlay(image, heatmap.grid, figure, title=cfg.phrase)
        written.append(figure)
    for path in written:
        print(path)
    return written


def cmd_phrases(cfg: DictConfig) -> List[str]:
    lexicon = Lexicon.load(cfg.lexicon_path) if cfg.lexicon_path else None
    if cfg.phrases_file:
        sentences = Path(cfg.phrases_file).read_text(encoding="utf-8").splitlines()
    elif cfg.text:
        sentences = [cfg.text]
    else:
        raise ConfigError("phrases needs text=... or phrases_file=...")
    lines = [format_phrases(extract_phrases(s, lexicon)) for s in sentences]
    for line in lines:
        print(line)
    return lines


COMMANDS: Dict[str, Callable[[DictConfig], object]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "retrieve": cmd_retrieve,
    "heatmap": cmd_heatmap,
    "phrases": cmd_phrases,
}


def run_command(cfg: DictConfig) -> int:
    try:
        validate_config(cfg)
        COMMANDS[cfg.cmd](cfg)
    except LinGridError as e:
        logger.error(f"{cfg.get('cmd', '?')} failed: {e}")
        return e.exit_code
    return 0
