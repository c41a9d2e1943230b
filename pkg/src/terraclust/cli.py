"""``terraclust`` command line."""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cluster import pcc_kmeans
from .constraints import ConstraintConfig, LRConfig, RSMConfig, SimilarityConfig, generate_constraints
from .core import ConstraintSet, EmbeddingSet, FilterClass, Split, validate_dataset
from .embed import fit_pca_whiten
from .formats import (
    read_constraints,
    read_embeddings,
    read_labels,
    read_patches,
    write_cluster_model,
    write_constraints,
    write_embeddings,
    write_labels,
    write_metric_model,
    write_patches,
)
from .ingest import extract_dataset, featurize_patches, load_manifest
from .metrics import split_train_test
from .patch_filter import FilterConfig, filter_patches
from .pipeline import (
    ABLATION_VARIANTS,
    ALL_SOURCES,
    PipelineConfig,
    emit_cluster_montage,
    evaluate,
    format_table,
    run_ablation,
    run_dccml,
    variant_name,
)
from .synth import DatasetConfig, SceneConfig, generate_dataset, write_dataset

log = logging.getLogger("terraclust")

METRIC_KEYS = ("db_index", "nmi_vs_truth", "precision_at_10_mean", "homogeneous_clusters", "k", "n_patches")


def _out(args, name) -> Path:
    p = Path(name)
    path = p if p.is_absolute() else Path(args.out_dir) / p
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _in(args, name) -> Path:
    p = Path(name)
    if p.exists() or p.is_absolute():
        return p
    alt = Path(args.out_dir) / p
    return alt if alt.exists() else p


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serialisable: {type(o).__name__}")


def _load_config(args) -> PipelineConfig:
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    cfg = PipelineConfig.from_dict(base)
    overrides = {}
    for flag, key in (("k", "k"), ("lam", "lam"), ("max_rounds", "max_rounds"), ("pca_dim", "pca_dim")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides[key] = val
    if args.seed is not None:
        overrides["seed"] = args.seed
    sources = getattr(args, "sources", None)
    if sources is not None:
        overrides["constraint_sources"] = _parse_sources(sources)
    return cfg.replace(**overrides) if overrides else cfg


def _parse_sources(text: str) -> tuple[str, ...]:
    text = text.strip()
    if text in ("", "none"):
        return ()
    if text == "all":
        return ALL_SOURCES
    return tuple(s.strip() for s in text.split("+") if s.strip())


def _versions() -> dict:
    import numba
    import scipy
    import sklearn

    return {
        "terraclust": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "numba": numba.__version__,
    }


def _write_run_manifest(args, command: str, config: dict, files: dict, extra: dict | None = None) -> None:
    manifest = {"command": command, "config": config, "versions": _versions(), "files": files}
    if extra:
        manifest.update(extra)
    _dump_json(_out(args, "run.json"), manifest)


def _patch_inputs(args):
    """Dataset, patches and features from --manifest (+ optional --patches/--features)."""
    dataset = load_manifest(_in(args, args.manifest))
    if getattr(args, "patches", None):
        patches = read_patches(_in(args, args.patches))
    else:
        patches = extract_dataset(dataset, _sizes(args.patch_sizes), args.stride)
        patches = split_train_test(patches, {e.image_id: e.width for e in dataset.images})
    if getattr(args, "keep", None):
        keep = {FilterClass(k.strip().capitalize()) for k in args.keep.split(",")}
        patches = [p for p in filter_patches(dataset, patches, FilterConfig()) if p.filter_class in keep]
    return dataset, patches


def _sizes(text) -> tuple[int, ...]:
    return tuple(int(s) for s in str(text).split(","))


def _truth(dataset, patches):
    images = dataset.by_id()
    labels = []
    for p in patches:
        cm = images[p.image_id].class_map
        if cm is None:
            return None
        labels.append(int(cm[p.center_row, p.center_col]))
    return np.array(labels, dtype=np.int64)


def _constraint_config(args, sources=ALL_SOURCES) -> ConstraintConfig:
    sim = SimilarityConfig(
        alpha=args.alpha, beta=args.beta, sigma_spatial=args.sigma_spatial, sigma_depth=args.sigma_depth, threshold=args.threshold
    )
    return ConstraintConfig(similarity=sim, lr=LRConfig(), rsm=RSMConfig(search_fraction=args.rsm_search), sources=tuple(sources))


# -- subcommands --------------------------------------------------------------------


def cmd_synth(args) -> int:
    scene = SceneConfig(
        n_classes=args.classes,
        image_size=args.size,
        brightness_sigma=args.brightness_sigma,
        noise_sigma=args.noise_sigma,
    )
    cfg = DatasetConfig(n_scenes=args.scenes, scene=scene, rsm_fraction=args.rsm_fraction, seed=args.seed or 0)
    synth = generate_dataset(cfg)
    manifest = write_dataset(synth, args.out_dir)
    print(f"wrote {len(synth.dataset.images)} images, manifest {manifest}")
    return 0


def cmd_extract(args) -> int:
    dataset = load_manifest(_in(args, args.manifest))
    patches = extract_dataset(dataset, _sizes(args.patch_sizes), args.stride)
    patches = split_train_test(patches, {e.image_id: e.width for e in dataset.images})
    report = validate_dataset(patches, image_sizes=dataset.image_sizes())
    if report.violations:
        for v in report.violations:
            print(f"violation: {v}", file=sys.stderr)
        return 2
    write_patches(_out(args, args.out), patches)
    if args.features:
        X = featurize_patches(dataset, patches)
        write_embeddings(_out(args, args.features), EmbeddingSet(X, np.array([p.patch_id for p in patches])))
    truth = _truth(dataset, patches)
    if args.truth and truth is not None:
        write_labels(_out(args, args.truth), [p.patch_id for p in patches], truth, "class")
    print(f"{len(patches)} patches")
    return 0


def cmd_filter(args) -> int:
    dataset = load_manifest(_in(args, args.manifest))
    patches = filter_patches(dataset, read_patches(_in(args, args.patches)), FilterConfig(depth_cutoff=args.depth_cutoff))
    keep = {FilterClass(k.strip().capitalize()) for k in args.keep.split(",")}
    kept = [p for p in patches if p.filter_class in keep]
    write_patches(_out(args, args.out), kept)
    counts = {}
    for p in patches:
        counts[p.filter_class.value] = counts.get(p.filter_class.value, 0) + 1
    print(json.dumps(counts, sort_keys=True))
    return 0


def cmd_constraints(args) -> int:
    dataset = load_manifest(_in(args, args.manifest))
    patches = read_patches(_in(args, args.patches))
    report = generate_constraints(dataset, patches, _constraint_config(args, _parse_sources(args.sources or "all")))
    write_constraints(_out(args, args.out), report.constraints)
    for left, right in report.lr_skips:
        print(f"LR pair ({left}, {right}) skipped: no confident localisation", file=sys.stderr)
    print(json.dumps(report.constraints.count_by_source(), sort_keys=True))
    return 0


def cmd_cluster(args) -> int:
    emb = read_embeddings(_in(args, args.features))
    cons = read_constraints(_in(args, args.constraints)) if args.constraints else ConstraintSet()
    if args.whiten:
        _, emb = fit_pca_whiten(emb, args.whiten)
    model = pcc_kmeans(emb, args.k, cons, args.lam if args.lam is not None else 1.0, random_state=args.seed)
    outs = args.out.split(",")
    write_cluster_model(_out(args, outs[0]), model)
    if len(outs) > 1:
        write_labels(_out(args, outs[1]), emb.patch_ids, model.assignments, "cluster")
    print(f"J={model.objective:.6f} iterations={model.iterations_run}")
    return 0


def _evaluate_patches(embedding, assignments, patches, truth):
    groups = [(p.site, p.drive) for p in patches]
    test = np.array([p.split == Split.TEST for p in patches])
    ids = np.array([p.patch_id for p in patches])
    metrics = evaluate(embedding, assignments, truth, groups, ids, test if test.any() else None)
    return {k: metrics[k] for k in METRIC_KEYS}


def cmd_run(args) -> int:
    cfg = _load_config(args)
    dataset, patches = _patch_inputs(args)
    ids = np.array([p.patch_id for p in patches])
    X = featurize_patches(dataset, patches)
    if args.constraints:
        cons = read_constraints(_in(args, args.constraints))
    else:
        cons = generate_constraints(dataset, patches, _constraint_config(args, cfg.constraint_sources)).constraints
    truth = _truth(dataset, patches)
    res = run_dccml(EmbeddingSet(X, ids), cons, cfg)

    files = {"rounds": []}
    for rec in res.history:
        a = f"rounds/round_{rec.round:02d}_assignments.csv"
        e = f"rounds/round_{rec.round:02d}_embedding.temb"
        write_labels(_out(args, a), ids, rec.assignments, "cluster")
        write_embeddings(_out(args, e), EmbeddingSet(rec.embedding, ids))
        files["rounds"].append({**rec.summary(), "assignments": a, "embedding": e})
    write_patches(_out(args, "patches.csv"), patches)
    write_constraints(_out(args, "constraints.csv"), res.constraints)
    write_labels(_out(args, "assignments.csv"), ids, res.assignments, "cluster")
    write_cluster_model(_out(args, "model.tcm"), res.cluster_model)
    write_metric_model(_out(args, "metric.tcmet"), res.metric_model)
    metrics = _evaluate_patches(res.embedding.values, res.assignments, patches, truth)
    _dump_json(_out(args, "metrics.json"), metrics)
    files.update(
        patches="patches.csv",
        constraints="constraints.csv",
        assignments="assignments.csv",
        cluster_model="model.tcm",
        metric_model="metric.tcmet",
        metrics="metrics.json",
    )
    _write_run_manifest(
        args,
        "run",
        cfg.to_dict(),
        files,
        {
            "status": res.status,
            "selected_round": res.selected_round,
            "constraint_counts": res.constraints.count_by_source(),
        },
    )
    print(f"{res.status} after {len(res.history)} rounds (selected round {res.selected_round})")
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    dataset, patches = _patch_inputs(args)
    ids = np.array([p.patch_id for p in patches])
    X = featurize_patches(dataset, patches)
    cons = generate_constraints(dataset, patches, _constraint_config(args, ALL_SOURCES)).constraints
    truth = _truth(dataset, patches)
    variants = [_parse_sources(v) for v in args.variants.split(";")] if args.variants else list(ABLATION_VARIANTS)
    groups = [(p.site, p.drive) for p in patches]
    test = np.array([p.split == Split.TEST for p in patches])
    rows = run_ablation(EmbeddingSet(X, ids), cons, cfg, variants, truth, groups, ids, test if test.any() else None)
    _dump_json(_out(args, "ablation.json"), rows)
    table = format_table(rows)
    _out(args, "ablation.txt").write_text(table + "\n")
    _write_run_manifest(
        args, "ablate", cfg.to_dict(), {"table": "ablation.txt", "rows": "ablation.json"},
        {"variants": [variant_name(v) for v in variants]},
    )
    print(table)
    return 0


def cmd_eval(args) -> int:
    emb = read_embeddings(_in(args, args.features))
    assign_map = read_labels(_in(args, args.assignments))
    ids = emb.patch_ids
    try:
        assignments = np.array([assign_map[int(i)] for i in ids])
    except KeyError as exc:
        raise SystemExit(f"assignments missing patch {exc}") from None
    truth = None
    if args.truth:
        tmap = read_labels(_in(args, args.truth))
        truth = np.array([tmap[int(i)] for i in ids])
    wanted = {m.strip() for m in args.metrics.split(",")}
    groups = qmask = None
    if args.patches:
        by_id = {p.patch_id: p for p in read_patches(_in(args, args.patches))}
        rows = [by_id[int(i)] for i in ids]
        groups = [(p.site, p.drive) for p in rows]
        qmask = np.array([p.split == Split.TEST for p in rows])
        qmask = qmask if qmask.any() else None
    metrics = evaluate(emb.values, assignments, truth, groups if "p@10" in wanted else None, ids, qmask)
    keep = {"k", "n_patches"}
    keep |= {"db_index"} if "db" in wanted else set()
    keep |= {"nmi_vs_truth"} if "nmi" in wanted else set()
    keep |= {"homogeneous_clusters"} if "homogeneity" in wanted else set()
    keep |= {"precision_at_10_mean"} if "p@10" in wanted else set()
    out = {k: metrics[k] for k in METRIC_KEYS if k in keep}
    _dump_json(_out(args, args.out), out)
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_montage(args) -> int:
    dataset = load_manifest(_in(args, args.manifest))
    patches = read_patches(_in(args, args.patches))
    amap = read_labels(_in(args, args.assignments))
    assignments = np.array([amap.get(p.patch_id, -1) for p in patches])
    if args.cluster not in set(amap.values()):
        raise SystemExit(f"unknown cluster id {args.cluster}")
    shape = emit_cluster_montage(
        dataset, patches, assignments, args.cluster, _out(args, args.out), args.n_samples, args.seed or 0
    )
    print(f"montage {shape[0]}x{shape[1]} -> {args.out}")
    return 0


# -- parser -----------------------------------------------------------------------


def _add_constraint_flags(p):
    p.add_argument("--sigma-spatial", type=float, default=512.0)
    p.add_argument("--sigma-depth", type=float, default=6.0)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--threshold", type=float, default=0.7)
    p.add_argument("--rsm-search", type=float, default=0.25, help="RSM search margin as a fraction of image size")


def _add_dataset_flags(p):
    p.add_argument("--manifest", required=True)
    p.add_argument("--patches", help="pre-extracted patch CSV (skips extraction)")
    p.add_argument("--patch-sizes", default="128,256")
    p.add_argument("--stride", type=float, default=0.5)
    p.add_argument("--keep", help="filter classes to keep, e.g. rock,soil")


def _add_pipeline_flags(p):
    p.add_argument("--k", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--max-rounds", type=int)
    p.add_argument("--pca-dim", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="terraclust", description="Constrained clustering of terrain patches.")
    parser.add_argument("--version", action="version", version=f"terraclust {__version__}")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None, help="cap on BLAS/numba threads")
    parser.add_argument("--config", help="JSON file mirroring PipelineConfig")
    parser.add_argument("--out-dir", default=".")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--size", type=int, default=1024)
    p.add_argument("--brightness-sigma", type=float, default=0.25)
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--rsm-fraction", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="sliding-window patch extraction and features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--patch-sizes", default="128,256")
    p.add_argument("--stride", type=float, default=0.5)
    p.add_argument("--out", default="patches.csv")
    p.add_argument("--features", default=None)
    p.add_argument("--truth", default=None, help="write region-class labels at patch centres")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("filter", help="classify patches and keep selected classes")
    p.add_argument("--patches", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--keep", default="rock")
    p.add_argument("--depth-cutoff", type=float, default=10.0)
    p.add_argument("--out", default="filtered.csv")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("constraints", help="generate Neighbor/LR/RSM links")
    p.add_argument("--patches", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--sources", default="all", help="e.g. Neighbor+LR, all, none")
    _add_constraint_flags(p)
    p.add_argument("--out", default="constraints.csv")
    p.set_defaults(func=cmd_constraints)

    p = sub.add_parser("cluster", help="one constrained k-means fit")
    p.add_argument("--features", required=True)
    p.add_argument("--constraints")
    p.add_argument("--k", type=int, default=150)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--whiten", type=int, default=None, help="PCA-whiten to this many dims first")
    p.add_argument("--out", default="model.tcm,assignments.csv")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("run", help="full iterative loop")
    _add_dataset_flags(p)
    _add_constraint_flags(p)
    _add_pipeline_flags(p)
    p.add_argument("--constraints", help="pre-generated constraint CSV")
    p.add_argument("--sources", default=None, help="active constraint sources")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="loop once per constraint-source subset")
    _add_dataset_flags(p)
    _add_constraint_flags(p)
    _add_pipeline_flags(p)
    p.add_argument("--variants", default=None, help="';'-separated subsets, e.g. 'none;Neighbor;all'")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="metrics of a clustering")
    p.add_argument("--features", required=True)
    p.add_argument("--assignments", required=True)
    p.add_argument("--truth")
    p.add_argument("--patches", help="patch CSV for site/drive exclusion and the test split")
    p.add_argument("--metrics", default="db,nmi,p@10,homogeneity")
    p.add_argument("--out", default="metrics.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("montage", help="tile random members of one cluster")
    p.add_argument("--manifest", required=True)
    p.add_argument("--patches", required=True)
    p.add_argument("--assignments", required=True)
    p.add_argument("--cluster", type=int, required=True)
    p.add_argument("--n-samples", type=int, default=300)
    p.add_argument("--out", default="montage.ppm")
    p.set_defaults(func=cmd_montage)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except OSError as exc:
        raise SystemExit(f"terraclust: {exc}") from None


if __name__ == "__main__":
    sys.exit(main())
