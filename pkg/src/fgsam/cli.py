"""Command-line driver: graph generation, training, analysis, benchmarks.

Configuration comes from an INI-style file of key=value lines under
section headers; command-line flags override file values.
"""

import argparse
import configparser
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import analysis, fsnc, gradcheck
from . import model as mdl
from . import optim
from .graphcore import (CsbmParams, GraphError, generate_csbm, load_graph,
                        normalize, save_graph)
from .model import ModelError
from .optim import Hyperparams, OptimError
from .seeding import stream_rng

_SCHEMA = {
    "run": {"seed", "out"},
    "graph": {"path"},
    "csbm": {"classes", "nodes_per_class", "p", "q", "dist", "dim"},
    "protocol": {"way", "shot", "query", "episodes", "patience",
                 "val_interval", "val_tasks", "test_tasks", "repeats",
                 "layers", "hidden", "scheme", "optimizer", "split"},
    "optim": {"lr", "rho", "lambda", "alpha", "k", "beta1", "beta2", "eps",
              "weight_decay"},
}

_CFG_ALIASES = {"lambda": "lambda_topo", "classes": "csbm_classes",
                "path": "graph", "split": "split_ratio"}


class CliError(ValueError):
    pass


def _load_config(path: str) -> dict:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise CliError(f"cannot read config {path}")
    flat = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise CliError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in _SCHEMA[section]:
                raise CliError(f"unknown key {key!r} in section [{section}]")
            flat[_CFG_ALIASES.get(key, key)] = value
    return flat


def _resolve(args, cfg, name, cast, default):
    value = getattr(args, name, None)
    if value is not None:
        return value
    if name in cfg:
        return cast(cfg[name])
    return default


def _settings(args):
    cfg = _load_config(args.config) if getattr(args, "config", None) else {}

    def get(name, cast, default):
        return _resolve(args, cfg, name, cast, default)

    return cfg, get


def _build_hp(get) -> Hyperparams:
    return Hyperparams(
        lr=get("lr", float, 0.01),
        rho=get("rho", float, 0.05),
        lambda_topo=get("lambda_topo", float, 0.0),
        alpha=get("alpha", float, 0.7),
        k=get("k", int, 2),
        beta1=get("beta1", float, 0.9),
        beta2=get("beta2", float, 0.999),
        eps=get("eps", float, 1e-8),
        weight_decay=get("weight_decay", float, 0.0),
    )


def _build_protocol(get, optimizer=None, **overrides) -> fsnc.ProtocolConfig:
    cfg = fsnc.ProtocolConfig(
        way=get("way", int, 2),
        shot=get("shot", int, 3),
        query=get("query", int, 10),
        repeats=get("repeats", int, 5),
        episodes=get("episodes", int, 200),
        patience=get("patience", int, 10),
        val_interval=get("val_interval", int, 10),
        val_tasks=get("val_tasks", int, 20),
        test_tasks=get("test_tasks", int, 100),
        layers=get("layers", int, 2),
        hidden=get("hidden", int, 16),
        scheme=get("scheme", str, "gcn-sym"),
        optimizer=optimizer or get("optimizer", str, "adam"),
        hp=_build_hp(get),
        seed=get("seed", int, 0),
    )
    return replace(cfg, **overrides) if overrides else cfg


def _echo_config(outdir: str, payload: dict) -> None:
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "config_echo.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _echo_ini(outdir: str, sections: dict) -> None:
    """Write a config echo that can be fed back through --config."""
    os.makedirs(outdir, exist_ok=True)
    parser = configparser.ConfigParser()
    for section, values in sections.items():
        parser[section] = {k: str(v) for k, v in values.items()}
    with open(os.path.join(outdir, "config_echo.ini"), "w") as fh:
        parser.write(fh)


def _protocol_sections(seed, graph_path, config, ratio) -> dict:
    hp = config.hp
    return {
        "run": {"seed": seed},
        "graph": {"path": graph_path},
        "protocol": {
            "way": config.way, "shot": config.shot, "query": config.query,
            "episodes": config.episodes, "patience": config.patience,
            "val_interval": config.val_interval,
            "val_tasks": config.val_tasks, "test_tasks": config.test_tasks,
            "repeats": config.repeats, "layers": config.layers,
            "hidden": config.hidden, "scheme": config.scheme,
            "optimizer": config.optimizer,
            "split": "/".join(str(r) for r in ratio),
        },
        "optim": {
            "lr": hp.lr, "rho": hp.rho, "lambda": hp.lambda_topo,
            "alpha": hp.alpha, "k": hp.k, "beta1": hp.beta1,
            "beta2": hp.beta2, "eps": hp.eps,
            "weight_decay": hp.weight_decay,
        },
    }


def _parse_split(text: str):
    parts = [int(p) for p in text.split("/")]
    if len(parts) != 3:
        raise CliError("split must look like TRAIN/VAL/NOVEL, e.g. 12/4/4")
    return tuple(parts)


def _load_graph_arg(args, get):
    path = get("graph", str, None)
    if path is None:
        raise CliError("no graph directory given (--graph or [graph] path)")
    return load_graph(path), path


def _threads() -> int:
    return max(1, int(os.environ.get("FGSAM_THREADS", "1")))


def cmd_gen_csbm(args) -> int:
    _, get = _settings(args)
    out = get("out", str, None)
    if out is None:
        raise CliError("--out required")
    params = CsbmParams(
        K=get("csbm_classes", int, 2),
        nodes_per_class=get("nodes_per_class", int, 100),
        p=get("p", float, 0.1),
        q=get("q", float, 0.02),
        D=get("dist", float, 2.0),
        l=get("dim", int, 8),
        seed=get("seed", int, 0),
    )
    graph = generate_csbm(params)
    save_graph(graph, out)
    _echo_config(out, {"command": "gen-csbm", "params": vars(params)})
    print(f"wrote CSBM graph: n={graph.n} edges={graph.num_edges} "
          f"classes={graph.num_classes} -> {out}")
    return 0


def _run_fsnc_arm(config, graph, split, outdir):
    report = fsnc.train_protocol(config, graph, split)
    fsnc.write_train_report(report, outdir)
    return report


def cmd_fsnc(args) -> int:
    _, get = _settings(args)
    out = get("out", str, None)
    if out is None:
        raise CliError("--out required")
    graph, graph_path = _load_graph_arg(args, get)
    seed = get("seed", int, 0)
    ratio = _parse_split(get("split_ratio", str,
                             f"{graph.num_classes - 4}/2/2"))
    split = fsnc.split_classes(graph.num_classes, ratio, seed)
    config = _build_protocol(get)
    report = _run_fsnc_arm(config, graph, split, out)
    _echo_ini(out, _protocol_sections(seed, graph_path, config, ratio))
    print(f"fsnc [{config.optimizer}] test acc "
          f"{report.test_acc_mean:.4f} +/- {report.test_acc_std:.4f} "
          f"(gnn evals {report.gnn_evals}, mlp evals {report.mlp_evals})")
    return 0


def cmd_compare(args) -> int:
    _, get = _settings(args)
    out = get("out", str, None)
    if out is None:
        raise CliError("--out required")
    graph, graph_path = _load_graph_arg(args, get)
    seed = get("seed", int, 0)
    ratio = _parse_split(get("split_ratio", str,
                             f"{graph.num_classes - 4}/2/2"))
    split = fsnc.split_classes(graph.num_classes, ratio, seed)
    names = list(optim.OPTIMIZER_NAMES)
    configs = {name: _build_protocol(get, optimizer=name) for name in names}
    reports = {}
    workers = _threads()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {name: pool.submit(_run_fsnc_arm, configs[name], graph,
                                         split, os.path.join(out, name))
                       for name in names}
            reports = {name: fut.result() for name, fut in futures.items()}
    else:
        for name in names:
            reports[name] = _run_fsnc_arm(configs[name], graph, split,
                                          os.path.join(out, name))
    traces = {name: {"gnn_evals": rep.gnn_evals, "mlp_evals": rep.mlp_evals,
                     "wall_seconds": rep.wall_seconds}
              for name, rep in reports.items()}
    rows = analysis.cost_report(traces)
    analysis.write_report_csv(
        os.path.join(out, "cost_report.csv"),
        ("optimizer", "gnn_evals", "mlp_evals", "wall_seconds",
         "wall_ratio_vs_adam"),
        [(r["optimizer"], r["gnn_evals"], r["mlp_evals"], r["wall_seconds"],
          r["wall_ratio_vs_adam"]) for r in rows],
        {"command": "compare", "seed": seed, "split": ratio,
         "input_hash": analysis.content_hash(graph.features, graph.edges,
                                             graph.labels)})
    _echo_ini(out, _protocol_sections(seed, graph_path,
                                      configs[names[0]], ratio))
    for name in names:
        rep = reports[name]
        print(f"{name:7s} test acc {rep.test_acc_mean:.4f} "
              f"gnn={rep.gnn_evals} mlp={rep.mlp_evals} "
              f"wall={rep.wall_seconds:.2f}s")
    return 0


def make_nc_masks(graph, seed, train_frac=0.6, val_frac=0.2):
    """Deterministic stratified train/val/test node masks."""
    rng = stream_rng(seed, "episodes")
    train, val, test = [], [], []
    for c in range(graph.num_classes):
        members = rng.permutation(np.flatnonzero(graph.labels == c))
        n_tr = max(1, int(train_frac * members.size))
        n_val = max(1, int(val_frac * members.size))
        train.append(members[:n_tr])
        val.append(members[n_tr:n_tr + n_val])
        test.append(members[n_tr + n_val:])
    return (np.sort(np.concatenate(train)), np.sort(np.concatenate(val)),
            np.sort(np.concatenate(test)))


def cmd_nc(args) -> int:
    _, get = _settings(args)
    out = get("out", str, None)
    if out is None:
        raise CliError("--out required")
    graph, graph_path = _load_graph_arg(args, get)
    config = fsnc.NCConfig(
        steps=get("episodes", int, 200),
        patience=get("patience", int, 10),
        val_interval=get("val_interval", int, 10),
        layers=get("layers", int, 2),
        hidden=get("hidden", int, 16),
        scheme=get("scheme", str, "gcn-sym"),
        optimizer=get("optimizer", str, "adam"),
        hp=_build_hp(get),
        seed=get("seed", int, 0),
    )
    masks = make_nc_masks(graph, config.seed)
    report = fsnc.standard_nc_train(config, graph, masks)
    fsnc.write_nc_report(report, out)
    hp = config.hp
    _echo_ini(out, {
        "run": {"seed": config.seed},
        "graph": {"path": graph_path},
        "protocol": {"episodes": config.steps, "patience": config.patience,
                     "val_interval": config.val_interval,
                     "layers": config.layers, "hidden": config.hidden,
                     "scheme": config.scheme, "optimizer": config.optimizer},
        "optim": {"lr": hp.lr, "rho": hp.rho, "lambda": hp.lambda_topo,
                  "alpha": hp.alpha, "k": hp.k, "beta1": hp.beta1,
                  "beta2": hp.beta2, "eps": hp.eps,
                  "weight_decay": hp.weight_decay},
    })
    print(f"nc [{config.optimizer}] test acc {report.test_acc:.4f} "
          f"(stopped at step {report.stop_step})")
    return 0


def cmd_landscape(args) -> int:
    _, get = _settings(args)
    out = get("out", str, None)
    if out is None:
        raise CliError("--out required")
    graph, _ = _load_graph_arg(args, get)
    seed = get("seed", int, 0)
    layers = get("layers", int, 2)
    hidden = get("hidden", int, 16)
    scheme = get("scheme", str, "gcn-sym")
    if args.checkpoint:
        params, hidden = mdl.load_checkpoint(args.checkpoint)
    else:
        dims = mdl.uniform_dims(graph.d0, hidden, graph.num_classes, layers)
        params = mdl.init_params(dims, stream_rng(seed, "init"))
    operator = normalize(graph, scheme)
    spec = mdl.loss_spec_from_labels(np.arange(graph.n), graph.labels,
                                     graph.num_classes)
    half = (args.grid_points - 1) // 2
    grid = np.linspace(-args.grid_range, args.grid_range, 2 * half + 1)
    slc = analysis.landscape_slice(params, graph, operator, spec,
                                   args.slice_dims, grid,
                                   seed=int(stream_rng(seed, "directions")
                                            .integers(2 ** 31)))
    os.makedirs(out, exist_ok=True)
    if args.slice_dims == 1:
        rows = [(float(a), float(l)) for a, l in zip(slc.alphas, slc.losses)]
        header = ("alpha", "loss")
    else:
        rows = [(float(a), float(b), float(slc.losses[i, j]))
                for i, a in enumerate(slc.alphas)
                for j, b in enumerate(slc.betas)]
        header = ("alpha", "beta", "loss")
    analysis.write_report_csv(
        os.path.join(out, "landscape.csv"), header, rows,
        {"command": "landscape", "seed": seed, "base_loss": slc.base_loss,
         "input_hash": analysis.content_hash(graph.features, graph.edges)})
    _echo_config(out, {"command": "landscape", "seed": seed,
                       "grid_points": args.grid_points,
                       "grid_range": args.grid_range,
                       "slice_dims": args.slice_dims})
    print(f"landscape slice written, base loss {slc.base_loss:.6f}")
    return 0


def cmd_drift(args) -> int:
    _, get = _settings(args)
    out = get("out", str, None)
    if out is None:
        raise CliError("--out required")
    graph, graph_path = _load_graph_arg(args, get)
    seed = get("seed", int, 0)
    ratio = _parse_split(get("split_ratio", str,
                             f"{graph.num_classes - 4}/2/2"))
    split = fsnc.split_classes(graph.num_classes, ratio, seed)
    config = _build_protocol(get, optimizer="fgsam+", repeats=1,
                             collect_bundles=True)
    report = fsnc.train_protocol(config, graph, split)
    drift = analysis.grad_drift(report.repeats[0].bundles)
    rows = []
    for i in range(len(drift["g_s"]["raw"])):
        row = [i]
        for name in analysis.DRIFT_NAMES:
            row.extend([float(drift[name]["raw"][i]),
                        float(drift[name]["relative"][i])])
        rows.append(tuple(row))
    header = ["exact_step"]
    for name in analysis.DRIFT_NAMES:
        header.extend([f"{name}_drift", f"{name}_drift_rel"])
    os.makedirs(out, exist_ok=True)
    analysis.write_report_csv(
        os.path.join(out, "drift.csv"), tuple(header), rows,
        {"command": "drift", "seed": seed,
         "input_hash": analysis.content_hash(graph.features, graph.edges)})
    _echo_ini(out, _protocol_sections(seed, graph_path, config, ratio))
    for name in analysis.DRIFT_NAMES:
        med = float(np.median(drift[name]["raw"]))
        print(f"median drift {name}: {med:.6g}")
    return 0


def cmd_rho_sweep(args) -> int:
    _, get = _settings(args)
    out = get("out", str, None)
    if out is None:
        raise CliError("--out required")
    graph, graph_path = _load_graph_arg(args, get)
    seed = get("seed", int, 0)
    ratio = _parse_split(get("split_ratio", str,
                             f"{graph.num_classes - 4}/2/2"))
    split = fsnc.split_classes(graph.num_classes, ratio, seed)
    config = _build_protocol(get)
    rhos = [float(r) for r in args.rhos.split(",")]
    curves = analysis.rho_sweep(config, rhos, graph, split)
    rows = [(config.optimizer, rho, step, loss)
            for rho, losses in sorted(curves.items())
            for step, loss in enumerate(losses)]
    os.makedirs(out, exist_ok=True)
    analysis.write_report_csv(
        os.path.join(out, "rho_sweep.csv"),
        ("optimizer", "rho", "step", "loss"), rows,
        {"command": "rho-sweep", "seed": seed,
         "input_hash": analysis.content_hash(graph.features, graph.edges)})
    _echo_ini(out, _protocol_sections(seed, graph_path, config, ratio))
    print(f"rho sweep: {len(curves)} curves written")
    return 0


def cmd_verify_theorem(args) -> int:
    _, get = _settings(args)
    params = CsbmParams(
        K=get("csbm_classes", int, 3),
        nodes_per_class=1,
        p=get("p", float, 0.6),
        q=get("q", float, 0.1),
        D=get("dist", float, 2.0),
        l=get("dim", int, 4),
        seed=get("seed", int, 0),
    )
    report = analysis.verify_theorem(params)
    print(f"max |w.b - w'.b'| = {report.max_offset_gap:.3e}")
    print(f"min cosine(w, w')  = {report.min_cosine:.15f}")
    return 0 if report.max_offset_gap <= 1e-9 else 1


def cmd_check_grads(args) -> int:
    _, get = _settings(args)
    results = gradcheck.run_suite(instances=args.instances,
                                  seed=get("seed", int, 0))
    worst = max(results, key=lambda r: r.rel_err)
    print(f"{len(results)} instances checked; "
          f"max relative error {worst.rel_err:.3e} ({worst.description})")
    return 0 if worst.rel_err < 1e-4 else 1


def bench_instance(seed=0):
    """An MP-dominated instance: large sparse graph, wide input features."""
    return generate_csbm(CsbmParams(K=5, nodes_per_class=1000, p=0.03,
                                    q=0.0025, D=4.0, l=128, seed=seed))


def run_bench(graph, steps, hp_base, seed=0):
    operator = normalize(graph, "gcn-sym")
    dims = mdl.uniform_dims(graph.d0, 16, graph.num_classes, 2)
    spec = mdl.loss_spec_from_labels(np.arange(graph.n), graph.labels,
                                     graph.num_classes)
    w0 = mdl.init_params(dims, stream_rng(seed, "init")).flatten()
    traces = {}
    for name in optim.OPTIMIZER_NAMES:
        obj = optim.model_objective(dims, graph, operator, spec)
        opt = optim.make_optimizer(name, hp_base)
        w = w0.copy()
        start = time.perf_counter()
        for _ in range(steps):
            w, _ = opt.step(obj, w)
        traces[name] = {"gnn_evals": obj.gnn_evals,
                        "mlp_evals": obj.mlp_evals,
                        "wall_seconds": time.perf_counter() - start}
    return traces


def cmd_bench(args) -> int:
    _, get = _settings(args)
    out = get("out", str, None)
    seed = get("seed", int, 0)
    steps = get("episodes", int, 200)
    hp = _build_hp(get)
    graph = bench_instance(seed)
    deg = graph.degrees().mean()
    print(f"bench graph: n={graph.n} edges={graph.num_edges} "
          f"mean degree {deg:.1f}")
    traces = run_bench(graph, steps, hp, seed=seed)
    rows = analysis.cost_report(traces)
    for r in rows:
        print(f"{r['optimizer']:7s} gnn={r['gnn_evals']:4d} "
              f"mlp={r['mlp_evals']:4d} wall={r['wall_seconds']:.2f}s "
              f"ratio={r['wall_ratio_vs_adam']:.2f}")
    if out:
        os.makedirs(out, exist_ok=True)
        analysis.write_report_csv(
            os.path.join(out, "bench.csv"),
            ("optimizer", "gnn_evals", "mlp_evals", "wall_seconds",
             "wall_ratio_vs_adam"),
            [(r["optimizer"], r["gnn_evals"], r["mlp_evals"],
              r["wall_seconds"], r["wall_ratio_vs_adam"]) for r in rows],
            {"command": "bench", "seed": seed, "steps": steps})
        _echo_config(out, {"command": "bench", "seed": seed, "steps": steps})
    return 0


def _add_common(p):
    p.add_argument("--config", type=str)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=str)


def _add_graph(p):
    p.add_argument("--graph", type=str, help="graph directory")


def _add_training(p):
    p.add_argument("--optimizer", choices=list(optim.OPTIMIZER_NAMES))
    p.add_argument("--rho", type=float)
    p.add_argument("--lambda", type=float, dest="lambda_topo")
    p.add_argument("--alpha", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--way", type=int)
    p.add_argument("--shot", type=int)
    p.add_argument("--query", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--val-interval", type=int)
    p.add_argument("--val-tasks", type=int)
    p.add_argument("--test-tasks", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--scheme", choices=["gcn-sym", "mean-neighbors",
                                        "identity"])
    p.add_argument("--split", type=str, dest="split_ratio",
                   help="class split TRAIN/VAL/NOVEL")


def _add_csbm(p):
    p.add_argument("--k", type=int, dest="csbm_classes",
                   help="number of classes")
    p.add_argument("--nodes-per-class", type=int)
    p.add_argument("--p", type=float)
    p.add_argument("--q", type=float)
    p.add_argument("--dist", type=float)
    p.add_argument("--dim", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fgsam",
        description="Sharpness-aware GNN optimizers with a PeerMLP fast "
                    "path: generation, training, analysis, benchmarking.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-csbm", help="generate a synthetic CSBM graph")
    _add_common(p)
    _add_csbm(p)
    p.set_defaults(func=cmd_gen_csbm)

    p = sub.add_parser("fsnc", help="episodic few-shot training + meta-test")
    _add_common(p)
    _add_graph(p)
    _add_training(p)
    p.set_defaults(func=cmd_fsnc)

    p = sub.add_parser("compare", help="paired runs of all optimizers")
    _add_common(p)
    _add_graph(p)
    _add_training(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("nc", help="standard node classification")
    _add_common(p)
    _add_graph(p)
    _add_training(p)
    p.set_defaults(func=cmd_nc)

    p = sub.add_parser("landscape", help="loss landscape slice")
    _add_common(p)
    _add_graph(p)
    _add_training(p)
    p.add_argument("--checkpoint", type=str)
    p.add_argument("--grid-points", type=int, default=41)
    p.add_argument("--grid-range", type=float, default=1.0)
    p.add_argument("--slice-dims", type=int, choices=[1, 2], default=1)
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("drift", help="gradient drift across exact steps")
    _add_common(p)
    _add_graph(p)
    _add_training(p)
    p.set_defaults(func=cmd_drift)

    p = sub.add_parser("rho-sweep", help="training-loss curves over rho")
    _add_common(p)
    _add_graph(p)
    _add_training(p)
    p.add_argument("--rhos", type=str, default="0.01,0.05,0.1,0.5,1.0")
    p.set_defaults(func=cmd_rho_sweep)

    p = sub.add_parser("verify-theorem",
                       help="optimal-classifier equality check")
    _add_common(p)
    _add_csbm(p)
    p.set_defaults(func=cmd_verify_theorem)

    p = sub.add_parser("check-grads", help="finite-difference gradient suite")
    _add_common(p)
    p.add_argument("--instances", type=int, default=50)
    p.set_defaults(func=cmd_check_grads)

    p = sub.add_parser("bench", help="wall-time benchmark on an MP-dominated "
                                     "instance")
    _add_common(p)
    _add_training(p)
    p.set_defaults(func=cmd_bench)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, GraphError, ModelError, OptimError, fsnc.FsncError,
            analysis.AnalysisError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
