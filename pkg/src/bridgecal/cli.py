"""Command-line harness: prepare, train, eval, sweep, ablate, diagnose.

All subcommands read one key=value config file and write their outputs
(resolved config, delimited tables, reports, figures, caches) under the
configured artifact directory. Exit codes: 0 ok, 1 usage or config
error, 2 data error, 3 numeric error. The BRIDGECAL_THREADS environment
variable caps BLAS parallelism.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .behavior import BehaviorModel, build_behavior_graph, make_residual
from .config import (
    ABLATION_VARIANTS,
    Config,
    parse_config,
    write_resolved,
)
from .data import Dataset, Split, load_features, load_interactions, validate_split_integrity
from .encoder import CoeffParams, ModelParams
from .errors import BridgecalError, ConfigError, DataError, NumericError
from .graphs import (
    GraphBundle,
    GraphOps,
    build_content_knn,
    build_multimodal_item_graph,
    build_normalized_bipartite,
)
from .metrics import band_diagnostics, evaluate, stratified_report, write_report
from .scoring import ScoringModel
from .sparse import SparseGraph
from .trainer import TrainConfig, fit, load_checkpoint, save_checkpoint
from . import plots

logger = logging.getLogger("bridgecal")

_FLOAT_FMT = "%.17g"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


# ---------------------------------------------------------------------------
# artifact preparation and caching
# ---------------------------------------------------------------------------


def _sha256(path: Path, extra: str = "") -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    digest.update(extra.encode("utf-8"))
    return digest.hexdigest()


class _Cache:
    def __init__(self, artifact_dir: Path):
        self.dir = artifact_dir
        self.path = artifact_dir / "cache_manifest.json"
        self.manifest = {}
        if self.path.exists():
            self.manifest = json.loads(self.path.read_text(encoding="utf-8"))
        self.rebuilt: list[str] = []

    def graph(self, name: str, input_hash: str, builder) -> SparseGraph:
        target = self.dir / f"{name}.brsg"
        entry = self.manifest.get(name)
        if entry == input_hash and target.exists():
            logger.info("reusing cached %s", target.name)
            return SparseGraph.load(target)
        graph = builder()
        graph.save(target)
        self.manifest[name] = input_hash
        self.rebuilt.append(name)
        logger.info("built %s (%d edges)", target.name, graph.nnz)
        return graph

    def flush(self) -> None:
        self.path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")


def load_dataset(cfg: Config) -> Dataset:
    ds = load_interactions(cfg.interactions)
    features = {}
    channels = cfg.channels()
    if "v" in channels:
        if not cfg.visual_features:
            raise ConfigError("visual_features path missing for the image channel")
        features["v"] = load_features(cfg.visual_features, ds.num_items)
    if "t" in channels:
        if not cfg.text_features:
            raise ConfigError("text_features path missing for the text channel")
        features["t"] = load_features(cfg.text_features, ds.num_items)
    return ds.with_features(features)


def ensure_artifacts(cfg: Config):
    """Load data, verify split integrity, and build or reuse cached graphs."""
    artifact_dir = Path(cfg.artifact_dir)
    artifact_dir.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(cfg)
    report = validate_split_integrity(ds)
    report_path = artifact_dir / "split_report.txt"
    report_path.write_text(report.to_text(), encoding="utf-8")
    if not report.ok:
        raise DataError(
            f"{len(report.violations)} split integrity violations; see {report_path}"
        )
    cache = _Cache(artifact_dir)
    interactions_hash = _sha256(Path(cfg.interactions))
    bipartite = cache.graph(
        "bipartite", interactions_hash, lambda: build_normalized_bipartite(ds)
    )
    item_graph = None
    if cfg.use_item_graph():
        key = hashlib.sha256()
        for path in (cfg.visual_features, cfg.text_features):
            if path:
                key.update(_sha256(Path(path)).encode())
        key.update(
            f"k={cfg.knn_k};mv={cfg.mix_visual};mt={cfg.mix_text};"
            f"di={cfg.drop_image};dt={cfg.drop_text}".encode()
        )

        def build_item_graph():
            channels = cfg.channels()
            empty = SparseGraph.empty(ds.num_items, ds.num_items)
            av = build_content_knn(ds.features["v"], cfg.knn_k) if "v" in channels else empty
            at = build_content_knn(ds.features["t"], cfg.knn_k) if "t" in channels else empty
            return build_multimodal_item_graph(av, at, cfg.mix_visual, cfg.mix_text)

        item_graph = cache.graph("item_graph", key.hexdigest(), build_item_graph)
    behavior_graph = None
    if cfg.behavior == "ben":
        behavior_graph = cache.graph(
            "behavior",
            _sha256(Path(cfg.interactions), extra=f"k_b={cfg.k_b}"),
            lambda: build_behavior_graph(ds, cfg.k_b),
        )
    cache.flush()
    return ds, GraphBundle(bipartite=bipartite, item_graph=item_graph), behavior_graph, cache


def build_residual(cfg: Config, ds: Dataset, behavior_graph):
    if cfg.behavior == "ben" and behavior_graph is not None:
        return BehaviorModel.build(
            ds, k_b=cfg.k_b, epsilon=cfg.behavior_eps, graph=behavior_graph
        )
    return make_residual(cfg.behavior, ds, k_b=cfg.k_b, ease_l2=cfg.ease_l2,
                         epsilon=cfg.behavior_eps)


def make_train_config(cfg: Config) -> TrainConfig:
    return TrainConfig(
        lr=cfg.lr,
        l2_reg=cfg.l2_reg,
        lambda_base=cfg.lambda_base,
        lambda_ib=0.0 if cfg.drop_ib else cfg.lambda_ib,
        lambda_freq=0.0 if cfg.drop_freq else cfg.lambda_freq,
        lambda_eta=cfg.lambda_eta,
        tau_eta=cfg.tau_eta,
        alpha_ib=cfg.alpha_ib,
        mu_ib=cfg.mu_ib,
        phi_plus=cfg.phi_plus,
        tau_disc=cfg.tau_disc,
        norm_eps=cfg.norm_eps,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        m_bands=cfg.m_bands,
        band_mode=cfg.band_mode,
        k_c_train=cfg.k_c_train,
        k_c_eval=cfg.k_c_eval,
        lambda_b=cfg.lambda_b,
        scope=cfg.scope,
        coeff=cfg.coeff,
        embed_dim=cfg.embed_dim,
        num_layers=cfg.num_layers,
        channels=cfg.channels(),
    )


def build_model(cfg: Config, ds: Dataset, bundle: GraphBundle, params: ModelParams,
                residual, lambda_b: float | None = None,
                coeff_mode: str | None = None) -> ScoringModel:
    return ScoringModel.build(
        params=params,
        ds=ds,
        ops=GraphOps.ensure(bundle),
        bands=None,
        residual=residual,
        lambda_b=cfg.lambda_b if lambda_b is None else lambda_b,
        k_c_eval=cfg.k_c_eval,
        scope=cfg.scope,
        coeff_mode=cfg.coeff if coeff_mode is None else coeff_mode,
        num_layers=cfg.num_layers,
        band_mode=cfg.band_mode,
        m_bands=cfg.m_bands,
        band_seed=cfg.seed,
    )


def _check_structure(params: ModelParams, cfg: Config) -> None:
    if params.dim != cfg.embed_dim:
        raise ConfigError(
            f"checkpoint dim {params.dim} != configured embed_dim {cfg.embed_dim}"
        )
    if params.num_bands != cfg.m_bands:
        raise ConfigError(
            f"checkpoint has {params.num_bands} bands, config asks {cfg.m_bands}"
        )
    if params.channels != cfg.channels():
        raise ConfigError(
            f"checkpoint channels {params.channels} != configured {cfg.channels()}"
        )


def _checkpoint_path(cfg: Config, arg: str | None) -> Path:
    if arg:
        return Path(arg)
    return Path(cfg.artifact_dir) / "checkpoint.brck"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_prepare(cfg: Config, args) -> int:
    ds, bundle, behavior_graph, cache = ensure_artifacts(cfg)
    write_resolved(cfg, Path(cfg.artifact_dir) / "prepare_resolved_config.txt")
    built = ", ".join(cache.rebuilt) if cache.rebuilt else "none (caches fresh)"
    print(f"prepared {ds.num_users} users, {ds.num_items} items; rebuilt: {built}")
    return 0


def cmd_train(cfg: Config, args) -> int:
    ds, bundle, behavior_graph, _ = ensure_artifacts(cfg)
    residual = build_residual(cfg, ds, behavior_graph)
    tcfg = make_train_config(cfg)
    artifact_dir = Path(cfg.artifact_dir)
    log_path = artifact_dir / "training_log.csv"
    columns = [
        "epoch", "loss_total", "loss_rank", "loss_base", "loss_ib",
        "loss_freq", "loss_eta", "loss_reg", "valid_recall20", "valid_ndcg20",
    ]
    history_rows: list[dict] = []
    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)

        def on_epoch(row: dict) -> None:
            history_rows.append(row)
            writer.writerow(
                [row["epoch"]] + [_FLOAT_FMT % row[c] for c in columns[1:]]
            )
            fh.flush()
            logger.info(
                "epoch %d: loss=%.5f valid R@20=%.5f",
                row["epoch"], row["loss_total"], row["valid_recall20"],
            )

        result = fit(ds, bundle, residual, tcfg, epoch_callback=on_epoch)

    ckpt_path = artifact_dir / "checkpoint.brck"
    save_checkpoint(ckpt_path, result.params, cfg.to_text())
    write_resolved(cfg, artifact_dir / "train_resolved_config.txt")
    if history_rows:
        plots.plot_training_curves(history_rows, artifact_dir / "training_curves.png")
    print(
        f"trained {tcfg.epochs} epochs; best epoch {result.best_epoch} "
        f"valid R@20 {result.best_valid_recall20:.5f}; checkpoint {ckpt_path}"
    )
    return 0


def cmd_eval(cfg: Config, args) -> int:
    ds, bundle, behavior_graph, _ = ensure_artifacts(cfg)
    params, _ = load_checkpoint(_checkpoint_path(cfg, args.checkpoint))
    _check_structure(params, cfg)
    residual = build_residual(cfg, ds, behavior_graph)
    model = build_model(cfg, ds, bundle, params, residual)
    artifact_dir = Path(cfg.artifact_dir)
    valid = evaluate(model, Split.VALID)
    test = evaluate(model, Split.TEST, mask_valid_at_test=cfg.mask_valid_at_test)
    write_report(valid, artifact_dir / "eval_valid.txt", artifact_dir / "eval_valid.json")
    write_report(test, artifact_dir / "eval_test.txt", artifact_dir / "eval_test.json")
    plots.plot_eval_metrics(test, "test metrics", artifact_dir / "eval_metrics.png")
    write_resolved(cfg, artifact_dir / "eval_resolved_config.txt")
    print(
        f"valid R@20 {valid.recall[20]:.5f} N@20 {valid.ndcg[20]:.5f}; "
        f"test R@20 {test.recall[20]:.5f} N@20 {test.ndcg[20]:.5f}"
    )
    return 0


def _neutral_coeff(params: ModelParams, ds: Dataset) -> ModelParams:
    clone = params.copy()
    if clone.coeff is None:
        dtype = clone.item_id_table.dtype
        clone.coeff = CoeffParams(
            user_bias=np.zeros(ds.num_users, dtype=dtype),
            item_bias=np.zeros(ds.num_items, dtype=dtype),
            score_coef=np.zeros((), dtype=dtype),
            behavior_coef=np.zeros((), dtype=dtype),
        )
    return clone


def cmd_sweep(cfg: Config, args) -> int:
    if cfg.sweep_retrain:
        return _sweep_retrain(cfg, args)
    ds, bundle, behavior_graph, _ = ensure_artifacts(cfg)
    ckpt = _checkpoint_path(cfg, args.checkpoint)
    if not ckpt.exists():
        raise ConfigError(f"sweep needs a trained checkpoint; not found: {ckpt}")
    params, _ = load_checkpoint(ckpt)
    _check_structure(params, cfg)
    residual = build_residual(cfg, ds, behavior_graph)
    base_model = build_model(cfg, ds, bundle, params, residual, lambda_b=0.0)

    rows: list[dict] = []
    candidates: list[ScoringModel] = []
    for lam in cfg.lambda_b_grid:
        model = dataclasses.replace(base_model, lambda_b=lam, coeff_mode="fixed")
        report = evaluate(model, Split.VALID)
        rows.append({
            "setting": "fixed",
            "lambda_b": lam,
            "valid_recall20": report.recall[20],
            "valid_ndcg20": report.ndcg[20],
        })
        candidates.append(model)
    control_model = dataclasses.replace(
        base_model,
        params=_neutral_coeff(params, ds),
        lambda_b=cfg.lambda_b,
        coeff_mode="conservative",
    )
    report = evaluate(control_model, Split.VALID)
    rows.append({
        "setting": "conservative",
        "lambda_b": cfg.lambda_b,
        "valid_recall20": report.recall[20],
        "valid_ndcg20": report.ndcg[20],
    })
    candidates.append(control_model)

    best = max(range(len(rows)), key=lambda i: rows[i]["valid_recall20"])
    logger.info(
        "selection complete before any test evaluation: setting=%s lambda_b=%s",
        rows[best]["setting"], rows[best]["lambda_b"],
    )
    test = evaluate(candidates[best], Split.TEST, mask_valid_at_test=cfg.mask_valid_at_test)
    rows[best]["test_recall20"] = test.recall[20]
    rows[best]["test_ndcg20"] = test.ndcg[20]

    artifact_dir = Path(cfg.artifact_dir)
    _write_table(
        rows,
        ["setting", "lambda_b", "valid_recall20", "valid_ndcg20",
         "test_recall20", "test_ndcg20"],
        artifact_dir / "sweep.csv",
    )
    plots.plot_sweep(rows, artifact_dir / "sweep_lambda.png")
    write_resolved(cfg, artifact_dir / "sweep_resolved_config.txt")
    print(
        f"selected {rows[best]['setting']} lambda_b={rows[best]['lambda_b']} "
        f"valid R@20 {rows[best]['valid_recall20']:.5f} "
        f"test R@20 {test.recall[20]:.5f} (test evaluated once, after selection)"
    )
    return 0


def _sweep_retrain(cfg: Config, args) -> int:
    """Grid sweep that retrains per point instead of post-hoc rescoring."""
    rows: list[dict] = []
    results = []
    for lam in cfg.lambda_b_grid:
        point = dataclasses.replace(cfg, lambda_b=lam, sweep_retrain=False)
        ds, bundle, behavior_graph, _ = ensure_artifacts(point)
        residual = build_residual(point, ds, behavior_graph)
        result = fit(ds, bundle, residual, make_train_config(point))
        rows.append({
            "setting": "fixed",
            "lambda_b": lam,
            "valid_recall20": result.best_valid_recall20,
            "valid_ndcg20": float("nan"),
        })
        results.append((point, result, ds, bundle, residual))
    best = max(range(len(rows)), key=lambda i: rows[i]["valid_recall20"])
    logger.info(
        "selection complete before any test evaluation: lambda_b=%s",
        rows[best]["lambda_b"],
    )
    point, result, ds, bundle, residual = results[best]
    model = build_model(point, ds, bundle, result.params, residual)
    test = evaluate(model, Split.TEST, mask_valid_at_test=cfg.mask_valid_at_test)
    rows[best]["test_recall20"] = test.recall[20]
    rows[best]["test_ndcg20"] = test.ndcg[20]
    artifact_dir = Path(cfg.artifact_dir)
    _write_table(
        rows,
        ["setting", "lambda_b", "valid_recall20", "valid_ndcg20",
         "test_recall20", "test_ndcg20"],
        artifact_dir / "sweep.csv",
    )
    plots.plot_sweep(rows, artifact_dir / "sweep_lambda.png")
    write_resolved(cfg, artifact_dir / "sweep_resolved_config.txt")
    print(f"retrain sweep selected lambda_b={rows[best]['lambda_b']}")
    return 0


def cmd_ablate(cfg: Config, args) -> int:
    rows: list[dict] = []
    artifact_dir = Path(cfg.artifact_dir)
    for variant in cfg.ablate_variants:
        overrides = ABLATION_VARIANTS[variant]
        vcfg = dataclasses.replace(cfg, **overrides)
        if vcfg.coeff == "conservative" and vcfg.lambda_eta == 0.0:
            vcfg = dataclasses.replace(vcfg, lambda_eta=0.001)
        logger.info("ablation variant %s", variant)
        ds, bundle, behavior_graph, _ = ensure_artifacts(vcfg)
        residual = build_residual(vcfg, ds, behavior_graph)
        result = fit(ds, bundle, residual, make_train_config(vcfg))
        model = build_model(vcfg, ds, bundle, result.params, residual)
        test = evaluate(model, Split.TEST, mask_valid_at_test=vcfg.mask_valid_at_test)
        rows.append({
            "variant": variant,
            "valid_recall20": result.best_valid_recall20,
            "test_recall10": test.recall[10],
            "test_recall20": test.recall[20],
            "test_ndcg10": test.ndcg[10],
            "test_ndcg20": test.ndcg[20],
        })
    _write_table(
        rows,
        ["variant", "valid_recall20", "test_recall10", "test_recall20",
         "test_ndcg10", "test_ndcg20"],
        artifact_dir / "ablation.csv",
    )
    plots.plot_ablation(rows, artifact_dir / "ablation_recall.png")
    write_resolved(cfg, artifact_dir / "ablate_resolved_config.txt")
    for row in rows:
        print(
            f"{row['variant']}: valid R@20 {row['valid_recall20']:.5f} "
            f"test R@20 {row['test_recall20']:.5f}"
        )
    return 0


def cmd_diagnose(cfg: Config, args) -> int:
    ds, bundle, behavior_graph, _ = ensure_artifacts(cfg)
    params, _ = load_checkpoint(_checkpoint_path(cfg, args.checkpoint))
    _check_structure(params, cfg)
    residual = build_residual(cfg, ds, behavior_graph)
    model = build_model(cfg, ds, bundle, params, residual)
    split = Split.TEST if cfg.diagnostics_split == "test" else Split.VALID
    strat = stratified_report(model, split, mask_valid_at_test=cfg.mask_valid_at_test)
    band = band_diagnostics(model, split)
    strat.diagnostics.update(band)
    artifact_dir = Path(cfg.artifact_dir)
    write_report(strat, artifact_dir / "diagnostics.txt", artifact_dir / "diagnostics.json")
    plots.plot_band_diagnostics(band, cfg.m_bands, artifact_dir / "band_diagnostics.png")
    plots.plot_strata(strat, artifact_dir / "strata_recall.png")
    write_resolved(cfg, artifact_dir / "diagnose_resolved_config.txt")
    print(
        f"diagnostics on {split.name.lower()}: head exposure "
        f"{strat.head_exposure:.4f}, low-high cosine "
        f"{strat.diagnostics['low_high_item_cosine']:.4f}"
    )
    return 0


def _write_table(rows: list[dict], columns: list[str], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            out = []
            for c in columns:
                v = row.get(c, "")
                if isinstance(v, float):
                    v = _FLOAT_FMT % v
                out.append(v)
            writer.writerow(out)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


_COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "diagnose": cmd_diagnose,
}


def _apply_thread_cap() -> None:
    cap = os.environ.get("BRIDGECAL_THREADS")
    if not cap:
        return
    try:
        limit = int(cap)
    except ValueError:
        raise ConfigError(f"BRIDGECAL_THREADS must be an integer, got {cap!r}")
    import threadpoolctl

    threadpoolctl.threadpool_limits(limits=limit)


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    parser = _Parser(prog="bridgecal", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--seed", type=int, default=None)
    try:
        args = parser.parse_args(argv)
        _apply_thread_cap()
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        Path(cfg.artifact_dir).mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](cfg, args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except BridgecalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
