"""Batch command-line front end.

Subcommands: ``simulate``, ``select-candidates``, ``train``, ``eval``,
``nees``, ``compare``.  Configuration comes from an optional JSON file plus
flag overrides (flags win); every subcommand writes a RunManifest JSON
alongside its outputs so a run is reproducible from the manifest alone.

Exit codes: 0 success, 1 usage error, 2 runtime/data error.  Errors go to
stderr; data goes to files.  No environment variables are read except the
optional thread-count override CONTACT_INEKF_THREADS.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__
from . import contactnet as cn
from . import evaluation as ev
from . import filter as flt
from . import sim
from . import training as tr
from .robot import RobotModel, desk_biped


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _write_json(path, doc):
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
    os.replace(tmp, path)


def write_manifest(out_path, command, config, seed, t_start, inputs=(), outputs=()):
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "wall_time_s": round(time.perf_counter() - t_start, 3),
    }
    _write_json(str(out_path) + ".manifest.json", doc)


def _load_model(path):
    return RobotModel.load(path) if path else desk_biped()


def _load_config_file(path) -> dict:
    if not path:
        return {}
    with open(path) as f:
        doc = json.load(f)
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    return doc


def _merged(args, file_cfg: dict, names):
    """Flag overrides win over the config file, which wins over defaults."""
    out = {}
    for name, default in names.items():
        flag = getattr(args, name.replace("-", "_"), None)
        if flag is not None:
            out[name] = flag
        elif name in file_cfg:
            out[name] = file_cfg[name]
        else:
            out[name] = default
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args):
    t0 = time.perf_counter()
    file_cfg = _load_config_file(args.config)
    opts = _merged(args, file_cfg, {
        "scenario": "gait", "seed": 0, "duration": 10.0, "rate": 200.0,
        "slip-probability": 0.8, "kick-speed": 0.25, "noise-free": False,
    })
    model = _load_model(args.model)
    if args.model is None:
        model = tr.scenario_model(opts["scenario"], model)
    if opts["noise-free"]:
        from dataclasses import replace

        cfg = sim.SimConfig(duration=opts["duration"], rate=opts["rate"],
                            scenario=opts["scenario"], seed=opts["seed"])
        cfg = replace(cfg, slip=sim.SlipParams(probability=0.0))
    else:
        cfg = tr.scenario_config(opts["scenario"], opts["seed"],
                                 opts["duration"], opts["rate"])
        from dataclasses import replace

        cfg = replace(cfg, slip=sim.SlipParams(probability=opts["slip-probability"],
                                               speed_range=(0.1, 0.6)))
        cfg = replace(cfg, disturbance=sim.DisturbanceParams(
            kick_speed=opts["kick-speed"], period=1.7))
    episode = sim.generate_episode(model, cfg)
    episode.save(args.out)
    write_manifest(args.out, "simulate", opts, opts["seed"], t0,
                   inputs=[args.model] if args.model else [],
                   outputs=[args.out])
    return 0


def cmd_select_candidates(args):
    t0 = time.perf_counter()
    model = _load_model(args.model)
    bodies = [b for b in args.bodies.split(",") if b]
    cands = model.sample_candidates(args.n, bodies, args.seed)
    doc = {"candidates": [{"link": c.link, "offset": [_f17(x) for x in c.offset],
                           "index": c.index} for c in cands]}
    _write_json(args.out, doc)
    write_manifest(args.out, "select-candidates",
                   {"n": args.n, "bodies": bodies, "seed": args.seed},
                   args.seed, t0, inputs=[args.model] if args.model else [],
                   outputs=[args.out])
    return 0


def _f17(x):
    return float(format(float(x), ".17g"))


def cmd_train(args):
    t0 = time.perf_counter()
    file_cfg = _load_config_file(args.config)
    opts = _merged(args, file_cfg, {
        "scenario": "gait", "seed": 0, "envs": 16, "buffer": 128,
        "history": 20, "iterations": 2000, "lr": 1e-3,
        "episode-duration": 10.0, "rate": 200.0, "eval-every": 100,
        "checkpoint-every": 200,
    })
    model = _load_model(args.model)
    if args.model is None:
        model = tr.scenario_model(opts["scenario"], model)
    cfg = tr.TrainConfig(
        envs=int(opts["envs"]), buffer=int(opts["buffer"]),
        history=int(opts["history"]), iterations=int(opts["iterations"]),
        lr=float(opts["lr"]), episode_duration=float(opts["episode-duration"]),
        rate=float(opts["rate"]), seed=int(opts["seed"]),
        scenario=opts["scenario"], eval_every=int(opts["eval-every"]),
    )

    ck_every = int(opts["checkpoint-every"])

    def progress(it, log, current_params):
        if ck_every > 0 and it % ck_every == 0:
            current_params.save(args.out)

    params, log = tr.train(model, cfg, progress=progress)
    params.save(args.out)
    if args.log:
        log.to_csv(args.log)
    write_manifest(args.out, "train", {k: opts[k] for k in opts}, cfg.seed, t0,
                   outputs=[args.out] + ([args.log] if args.log else []))
    return 0


def _run_eval(args):
    episode = sim.EpisodeDataset.load(args.data)
    model = _load_model(args.model)
    if model.n_candidates != episode.n_contacts:
        # candidate count must match the dataset
        if args.model is None and episode.n_contacts == 10:
            model = tr.scenario_model("ground", model)
        else:
            raise ValueError(
                f"model has {model.n_candidates} candidates but the dataset "
                f"carries {episode.n_contacts}")
    noise = flt.NoiseParams()
    if args.checkpoint:
        params = cn.ContactNetParams.load(args.checkpoint)
        source = ev.learned_covariances(params)
        label = "learned"
    elif args.baseline:
        source = ev.baseline_covariances(args.baseline, model, noise)
        label = args.baseline
    else:
        raise UsageError("eval requires --checkpoint or --baseline")
    result, batch = ev.run_filter(episode, model, noise, source,
                                  collect_cov=True)
    return result, batch, model, noise, label, source


def cmd_eval(args):
    t0 = time.perf_counter()
    result, batch, model, noise, label, source = _run_eval(args)
    pair = result.pair(batch, 0)
    report = ev.ate(pair)
    doc = {"model": label, "data": str(args.data), "ate": report.to_json()}
    _write_json(args.out, doc)
    outputs = [args.out]
    if args.per_step:
        _write_per_step_csv(args.per_step, result, batch, model, noise, source)
        outputs.append(args.per_step)
    if args.state_out:
        np.savez_compressed(
            args.state_out, t=result.t, r=result.r[:, 0], v=result.v[:, 0],
            p=result.p[:, 0], p_core=result.p_core[:, 0],
            gt_r=batch.r[:, 0], gt_v=batch.v[:, 0], gt_p=batch.p[:, 0])
        outputs.append(args.state_out)
    write_manifest(args.out, "eval", {"baseline": args.baseline,
                                      "checkpoint": args.checkpoint},
                   0, t0, inputs=[args.data], outputs=outputs)
    return 0


def _write_per_step_csv(path, result, batch, model, noise, source):
    """Per-step errors, NEES, and per-candidate total stddev (for plots)."""
    pair = result.pair(batch, 0)
    eps, _, _, _ = ev.nees(pair, "core")
    n = model.n_candidates
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "err_v", "err_p", "err_r", "nees_core"]
                   + [f"sqrt_tr_sigma_{i}" for i in range(n)])
        from . import liegroup as lg

        e_v = np.linalg.norm(
            np.einsum("tji,tj->ti", result.r[:, 0], result.v[:, 0])
            - np.einsum("tji,tj->ti", batch.r[:, 0], batch.v[:, 0]), axis=-1)
        e_p = np.linalg.norm(result.p[:, 0] - batch.p[:, 0], axis=-1)
        e_r = np.linalg.norm(lg.so3_log(
            np.einsum("tji,tjk->tik", batch.r[:, 0], result.r[:, 0])), axis=-1)
        for k in range(len(result.t)):
            state = flt.FilterState(result.r[k : k + 1, 0], result.v[k : k + 1, 0],
                                    result.p[k : k + 1, 0], result.pc[k : k + 1, 0],
                                    np.zeros((1, 3)), np.zeros((1, 3)))
            sigma = source(batch, max(k, 1), state, None)
            stds = cn.total_stddev(sigma)[0]
            w.writerow([_fmt(result.t[k]), _fmt(e_v[k]), _fmt(e_p[k]),
                        _fmt(e_r[k]), _fmt(eps[k])] + [_fmt(s) for s in stds])


def cmd_nees(args):
    t0 = time.perf_counter()
    run = np.load(args.run)
    pair = ev.TrajectoryPair(
        t=run["t"], r_est=run["r"], v_est=run["v"], p_est=run["p"],
        r_gt=run["gt_r"], v_gt=run["gt_v"], p_gt=run["gt_p"],
        p_core=run["p_core"])
    summary = {}
    series = {}
    for sel in ("core", "velocity", "position", "orientation"):
        eps, (r1, r2), frac, skipped = ev.nees(pair, sel, args.confidence)
        series[sel] = eps
        summary[sel] = {"r1": _f17(r1), "r2": _f17(r2),
                        "in_bounds_fraction": _f17(frac), "skipped": skipped}
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "nees_core", "nees_velocity", "nees_position",
                    "nees_orientation"])
        for k in range(len(pair.t)):
            w.writerow([_fmt(pair.t[k])] + [_fmt(series[s][k]) for s in
                                            ("core", "velocity", "position",
                                             "orientation")])
    _write_json(str(args.out) + ".summary.json", summary)
    write_manifest(args.out, "nees", {"confidence": args.confidence}, 0, t0,
                   inputs=[args.run],
                   outputs=[args.out, str(args.out) + ".summary.json"])
    return 0


def cmd_compare(args):
    t0 = time.perf_counter()
    rows = []
    for path in args.reports:
        with open(path) as f:
            doc = json.load(f)
        rows.append((doc.get("model", path), ev.AteReport.from_json(doc["ate"])))
    cols = ["rmse", "mae", "med", "std"]
    lines = [
        "| Model | " + " | ".join(f"Vel {c.upper()}" for c in cols)
        + " | " + " | ".join(f"Pos {c.upper()}" for c in cols)
        + " | " + " | ".join(f"Ori {c.upper()}" for c in cols) + " |",
        "|" + "---|" * (1 + 3 * len(cols)),
    ]
    for label, rep in rows:
        cells = [f"{rep.velocity[c]:.4f}" for c in cols]
        cells += [f"{rep.position[c]:.4f}" for c in cols]
        cells += [f"{rep.orientation[c]:.4f}" for c in cols]
        lines.append("| " + label + " | " + " | ".join(cells) + " |")
    with open(args.out, "w") as f:
        f.write("\n".join(lines) + "\n")
    write_manifest(args.out, "compare", {"reports": list(args.reports)}, 0, t0,
                   inputs=list(args.reports), outputs=[args.out])
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="contact-inekf",
                description="contact-aided invariant EKF toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic episode")
    s.add_argument("--model")
    s.add_argument("--config")
    s.add_argument("--scenario", choices=["gait", "ground"])
    s.add_argument("--seed", type=int)
    s.add_argument("--duration", type=float)
    s.add_argument("--rate", type=float)
    s.add_argument("--slip-probability", type=float)
    s.add_argument("--kick-speed", type=float)
    s.add_argument("--noise-free", action="store_true", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("select-candidates",
                       help="automated contact candidate placement")
    s.add_argument("--model")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--bodies", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_select_candidates)

    s = sub.add_parser("train", help="train the contact covariance module")
    s.add_argument("--model")
    s.add_argument("--config")
    s.add_argument("--scenario", choices=["gait", "ground"])
    s.add_argument("--seed", type=int)
    s.add_argument("--envs", type=int)
    s.add_argument("--buffer", type=int)
    s.add_argument("--history", type=int)
    s.add_argument("--iterations", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--episode-duration", type=float)
    s.add_argument("--rate", type=float)
    s.add_argument("--eval-every", type=int)
    s.add_argument("--checkpoint-every", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint or baseline")
    s.add_argument("--model")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--baseline", choices=list(ev.BASELINES))
    s.add_argument("--out", required=True)
    s.add_argument("--per-step")
    s.add_argument("--state-out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("nees", help="consistency metrics from an eval run")
    s.add_argument("--run", required=True, help="npz written by eval --state-out")
    s.add_argument("--confidence", type=float, default=0.95)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_nees)

    s = sub.add_parser("compare", help="markdown table from eval reports")
    s.add_argument("--reports", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_compare)
    return p


def main(argv=None) -> int:
    threads = os.environ.get("CONTACT_INEKF_THREADS")
    if threads:
        os.environ.setdefault("OMP_NUM_THREADS", threads)
        os.environ.setdefault("OPENBLAS_NUM_THREADS", threads)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime/data errors -> exit 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
