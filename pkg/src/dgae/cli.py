"""Command-line interface.

Every run that writes outputs also writes exactly one manifest JSON
next to its primary output, recording the resolved config, seed, and
format versions. Reports and datasets themselves carry no timestamps,
so identical seeds reproduce them byte for byte.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time

import numpy as np

from . import evaluation, prior, training
from .graphs import DatasetSpec, build_dataset, load_dataset, save_dataset
from .training import ConfigError, ModelConfig

__version__ = "0.1.0"
FORMAT_VERSIONS = {"checkpoint": 1, "dataset": 1, "sequence_cache": 1}
_VERSION_LINE = (f"dgae {__version__} (formats: " +
                 ", ".join(f"{k}={v}" for k, v in FORMAT_VERSIONS.items()) + ")")

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
_PARSERS = {"int": int, "float": float}


def parse_config_file(path):
    """Read `key = value` lines into a config dict. Every bad line and
    unknown key is reported, not just the first.
    """
    problems = []
    out = {}
    with open(path) as f:
        for ln, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                problems.append(f"line {ln}: expected 'key = value', got {line!r}")
                continue
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            ftype = _FIELD_TYPES.get(key)
            if ftype is None:
                problems.append(f"line {ln}: unknown config key {key!r}")
                continue
            ftype = ftype if isinstance(ftype, str) else ftype.__name__
            try:
                if ftype == "bool":
                    if val.lower() not in ("true", "false", "1", "0"):
                        raise ValueError("expected true/false")
                    out[key] = val.lower() in ("true", "1")
                else:
                    out[key] = _PARSERS[ftype](val)
            except (ValueError, KeyError):
                problems.append(f"line {ln}: bad {ftype} value for {key}: {val!r}")
    if problems:
        raise ConfigError(f"{path}: " + "; ".join(problems))
    return out


def resolve_config(args, base: ModelConfig | None = None) -> ModelConfig:
    d = base.to_dict() if base is not None else {}
    if getattr(args, "config", None):
        d.update(parse_config_file(args.config))
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    return training.config_from_dict(d)


def _maybe_dry_run(args, cfg: ModelConfig, outputs):
    if not getattr(args, "dry_run", False):
        return False
    for key, val in sorted(cfg.to_dict().items()):
        print(f"{key} = {val}")
    print("dry-run: would write " + ", ".join(outputs))
    return True


def write_manifest(args, cfg, outputs, extra=None):
    manifest = {
        "tool": _VERSION_LINE,
        "command": [args.command] + ([args.action] if hasattr(args, "action") else []),
        "argv": sys.argv[1:],
        "config": cfg.to_dict() if cfg is not None else None,
        "config_sha256": hashlib.sha256(
            json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()
        if cfg is not None else None,
        "outputs": outputs,
        "formats": FORMAT_VERSIONS,
        "created_unix": time.time(),
    }
    if extra:
        manifest.update(extra)
    path = outputs[0] + ".manifest.json"
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_models(path, need_prior):
    cfg, tensors, meta = training.load_checkpoint(path)
    rng = np.random.default_rng(0)  # weights are overwritten by the load
    model = training.AutoEncoderModel(cfg, rng)
    training.load_ae_state(model, tensors, meta)
    pmodel = None
    if need_prior:
        if meta.get("kind") != "full":
            raise ValueError(f"{path}: checkpoint has no prior; run train-prior first")
        pmodel = training.PriorModel(cfg, rng)
        training.load_prior_state(pmodel, tensors)
    return cfg, model, pmodel, meta


def _sync_data_config(cfg: ModelConfig, graphs, header):
    d = cfg.to_dict()
    d["node_categories"] = header["R"]
    d["edge_categories"] = header["S"]
    cfg = training.config_from_dict(d)
    biggest = max((g.n for g in graphs), default=0)
    if biggest > cfg.n_max:
        raise ConfigError(f"dataset has a graph with {biggest} nodes; raise n_max")
    return cfg


# ---------------------------------------------------------------------------
# subcommands

def cmd_dataset_gen(args):
    spec = DatasetSpec(args.spec, args.count, args.seed)
    graphs = build_dataset(spec)
    if _maybe_dry_run(args, ModelConfig(seed=args.seed), [args.out]):
        return 0
    save_dataset(args.out, graphs)
    write_manifest(args, None, [args.out],
                   {"generator": args.spec, "count": args.count, "seed": args.seed})
    print(f"wrote {len(graphs)} graphs to {args.out}")
    return 0


def cmd_featurize(args):
    graphs, header = load_dataset(args.inp)
    cfg = _sync_data_config(resolve_config(args), graphs, header)
    if args.report == "widths":
        from .features import feature_widths
        fn, fe = feature_widths(cfg.feature_config(), header["R"], header["S"])
        aug = training.featurize_all(graphs, cfg)
        real = sum(int(g.adjacency().sum()) for g in graphs)
        neigh = sum(int(a.neighborhood.sum()) for a in aug)
        print(f"graphs={len(graphs)}")
        print(f"node_feature_width={fn}")
        print(f"edge_feature_width={fe}")
        print(f"real_edge_slots={real}")
        print(f"neighborhood_slots={neigh}")
        print(f"virtual_edge_slots={neigh - real}")
    return 0


def cmd_train_ae(args):
    graphs, header = load_dataset(args.data)
    cfg = _sync_data_config(resolve_config(args), graphs, header)
    outputs = [args.out] + ([args.metrics] if args.metrics else [])
    if _maybe_dry_run(args, cfg, outputs):
        return 0
    model, info = training.train_autoencoder(graphs, cfg, metrics_path=args.metrics,
                                             log=print if args.verbose else None)
    training.save_checkpoint(args.out, cfg, model.state_arrays(), info["step"],
                             rng_state=info["rng_state"],
                             extra={"kind": "ae",
                                    "cb_initialized": model.codebooks.initialized})
    write_manifest(args, cfg, outputs)
    last = info["history"][-1] if info["history"] else {}
    print(f"trained {info['step']} steps; "
          f"holdout loss={last.get('loss_recon', float('nan')):.5f} "
          f"node_err={last.get('node_err', float('nan')):.5f} "
          f"edge_err={last.get('edge_err', float('nan')):.5f}")
    return 0


def cmd_train_prior(args):
    graphs, header = load_dataset(args.data)
    ckpt_cfg, model, _, _ = _load_models(args.ckpt, need_prior=False)
    cfg = _sync_data_config(resolve_config(args, base=ckpt_cfg), graphs, header)
    outputs = [args.out] + ([args.metrics] if args.metrics else []) \
        + ([args.cache] if args.cache else [])
    if _maybe_dry_run(args, cfg, outputs):
        return 0
    pmodel, info = training.train_prior(model, graphs, cfg, metrics_path=args.metrics,
                                        log=print if args.verbose else None,
                                        cache_path=args.cache)
    training.save_checkpoint(args.out, cfg, training.full_state_arrays(model, pmodel),
                             info["step"], rng_state=info["rng_state"],
                             extra={"kind": "full", "cb_initialized": True})
    write_manifest(args, cfg, outputs)
    last = info["history"][-1] if info["history"] else {}
    print(f"trained {info['step']} steps; holdout nll={last.get('nll', float('nan')):.5f}")
    return 0


def cmd_generate(args):
    cfg, model, pmodel, _ = _load_models(args.ckpt, need_prior=True)
    if _maybe_dry_run(args, cfg, [args.out]):
        return 0
    graphs, info = training.generate_graphs(model, pmodel, cfg, args.count, args.seed)
    save_dataset(args.out, graphs)
    write_manifest(args, cfg, [args.out],
                   {"count": args.count, "seed": args.seed,
                    "truncated": info["truncated"]})
    sizes = [g.n for g in graphs]
    print(f"wrote {len(graphs)} graphs to {args.out} "
          f"(mean nodes {np.mean(sizes):.2f}, truncated {info['truncated']})")
    return 0


def cmd_eval(args):
    ref, _ = load_dataset(args.ref)
    gen, _ = load_dataset(args.gen)
    cfg = resolve_config(args)
    report = evaluation.mmd_report(ref, gen, cfg.mmd_sigma, cfg.clustering_bins,
                                   jobs=args.jobs)
    if _maybe_dry_run(args, cfg, [args.out]):
        return 0
    evaluation.write_mmd_report(args.out, report)
    write_manifest(args, cfg, [args.out])
    print(f"mmd_degree={report['mmd_degree']:.6f} "
          f"mmd_clustering={report['mmd_clustering']:.6f} "
          f"mmd_orbit={report['mmd_orbit']:.6f} mmd_avg={report['mmd_avg']:.6f}")
    return 0


def _parse_seeds(text):
    try:
        return tuple(int(s) for s in text.split(","))
    except ValueError as e:
        raise ConfigError(f"bad --seeds value {text!r}: {e}") from e


def cmd_ablate_features(args):
    graphs, header = load_dataset(args.data)
    cfg = _sync_data_config(resolve_config(args), graphs, header)
    if _maybe_dry_run(args, cfg, [args.out]):
        return 0
    results = evaluation.ablation_feature_report(graphs, cfg, out_path=args.out,
                                                 seeds=_parse_seeds(args.seeds),
                                                 log=print if args.verbose else None)
    write_manifest(args, cfg, [args.out])
    for name, r in results.items():
        print(f"{name}: final holdout loss {r['final_loss']:.5f}")
    return 0


def _parse_grid(text):
    grid = []
    for cell in text.split(","):
        try:
            m, c = cell.split(":")
            grid.append((int(m), int(c)))
        except ValueError as e:
            raise ConfigError(f"bad --grid cell {cell!r} (want m:C): {e}") from e
    return grid


def cmd_ablate_codebook(args):
    graphs, header = load_dataset(args.data)
    cfg = _sync_data_config(resolve_config(args), graphs, header)
    grid = _parse_grid(args.grid) if args.grid else None
    if _maybe_dry_run(args, cfg, [args.out]):
        return 0
    results = evaluation.ablation_codebook_report(
        graphs, cfg, out_path=args.out, grid=grid, seeds=_parse_seeds(args.seeds),
        with_prior=not args.no_prior, log=print if args.verbose else None)
    write_manifest(args, cfg, [args.out])
    for (m, c), agg in results.items():
        mu, sd = agg["perplexity"]
        print(f"m={m} C={c}: perplexity {mu:.4f} +- {sd:.4f}")
    return 0


def cmd_bench_gen(args):
    cfg, model, pmodel, _ = _load_models(args.ckpt, need_prior=True)
    if _maybe_dry_run(args, cfg, [args.out]):
        return 0
    if args.nmax_sweep:
        values = [int(v) for v in args.nmax_sweep.split(",")]
        sweep = []
        for n_max in values:
            cfg_n = dataclasses.replace(cfg, n_max=n_max)
            bench = evaluation.benchmark_generation(model, pmodel, cfg_n,
                                                    args.count, args.seed)
            total = sum(dt for _, dt, _ in bench["step_times"])
            bench["mean_step_seconds"] = total / max(bench["steps"], 1)
            sweep.append(bench)
            print(f"n_max={n_max}: total {bench['total_seconds']:.2f}s, "
                  f"mean step {bench['mean_step_seconds'] * 1e3:.3f}ms")
        evaluation.write_benchmark(args.out, {"sweep": sweep})
    else:
        bench = evaluation.benchmark_generation(model, pmodel, cfg, args.count, args.seed)
        evaluation.write_benchmark(args.out, bench)
        print(f"{args.count} graphs in {bench['total_seconds']:.2f}s "
              f"({bench['graphs_per_second']:.1f}/s)")
    write_manifest(args, cfg, [args.out], {"count": args.count, "seed": args.seed})
    return 0


# ---------------------------------------------------------------------------

def _add_config_args(p, seed=True):
    p.add_argument("--config", help="key = value config file")
    if seed:
        p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--dry-run", action="store_true", dest="dry_run",
                   help="print the resolved config and exit")
    p.add_argument("--verbose", action="store_true", help="log per-epoch metrics")


def build_parser():
    parser = argparse.ArgumentParser(prog="dgae",
                                     description="discrete graph auto-encoder tools")
    parser.add_argument("--version", action="version", version=_VERSION_LINE)
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="dataset tools")
    ds_sub = ds.add_subparsers(dest="action", required=True)
    g = ds_sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--spec", required=True, help="generator name (community-small)")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--dry-run", action="store_true", dest="dry_run")
    g.set_defaults(func=cmd_dataset_gen)

    f = sub.add_parser("featurize", help="feature diagnostics for a dataset")
    f.add_argument("--in", dest="inp", required=True)
    f.add_argument("--report", choices=["widths"], default="widths")
    _add_config_args(f)
    f.set_defaults(func=cmd_featurize)

    t = sub.add_parser("train-ae", help="train the graph auto-encoder")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--metrics", help="per-epoch metrics CSV")
    _add_config_args(t)
    t.set_defaults(func=cmd_train_ae)

    tp = sub.add_parser("train-prior", help="train the sequence prior")
    tp.add_argument("--data", required=True)
    tp.add_argument("--ckpt", required=True, help="stage-1 checkpoint")
    tp.add_argument("--out", required=True)
    tp.add_argument("--metrics", help="per-epoch metrics CSV")
    tp.add_argument("--cache", help="write the encoded sequence cache here")
    _add_config_args(tp)
    tp.set_defaults(func=cmd_train_prior)

    ge = sub.add_parser("generate", help="sample graphs from a trained model")
    ge.add_argument("--ckpt", required=True)
    ge.add_argument("--count", type=int, required=True)
    ge.add_argument("--seed", type=int, default=0)
    ge.add_argument("--out", required=True)
    ge.add_argument("--dry-run", action="store_true", dest="dry_run")
    ge.set_defaults(func=cmd_generate)

    ev = sub.add_parser("eval", help="MMD report between two datasets")
    ev.add_argument("--ref", required=True)
    ev.add_argument("--gen", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--jobs", type=int, default=1, help="stat extraction workers")
    _add_config_args(ev)
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="ablation studies")
    ab_sub = ab.add_subparsers(dest="action", required=True)
    af = ab_sub.add_parser("features", help="feature-family grid")
    af.add_argument("--data", required=True)
    af.add_argument("--out", required=True)
    af.add_argument("--seeds", default="0,1,2")
    _add_config_args(af, seed=False)
    af.set_defaults(func=cmd_ablate_features)
    ac = ab_sub.add_parser("codebook", help="codebook size/partition grid")
    ac.add_argument("--data", required=True)
    ac.add_argument("--out", required=True)
    ac.add_argument("--grid", help="cells m:C, comma separated")
    ac.add_argument("--seeds", default="0,1,2")
    ac.add_argument("--no-prior", action="store_true", dest="no_prior",
                    help="skip stage 2 and MMD columns")
    _add_config_args(ac, seed=False)
    ac.set_defaults(func=cmd_ablate_codebook)

    be = sub.add_parser("bench", help="benchmarks")
    be_sub = be.add_subparsers(dest="action", required=True)
    bg = be_sub.add_parser("gen", help="generation timing")
    bg.add_argument("--ckpt", required=True)
    bg.add_argument("--count", type=int, default=1000)
    bg.add_argument("--seed", type=int, default=0)
    bg.add_argument("--out", required=True)
    bg.add_argument("--nmax-sweep", dest="nmax_sweep",
                    help="comma-separated n_max values to sweep")
    bg.add_argument("--dry-run", action="store_true", dest="dry_run")
    bg.set_defaults(func=cmd_bench_gen)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, RuntimeError, OSError) as e:
        print("error: " + str(e).replace("\n", "; "), file=sys.stderr)
        return 1
