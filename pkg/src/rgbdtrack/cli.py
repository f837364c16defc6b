"""Command-line interface.

Subcommands: ``synth`` renders sequence directories from a scene spec,
``train`` optimizes a model on them, ``track`` writes prediction traces,
``eval`` turns traces into metric reports and figures, and ``verify``
runs the built-in self-checks.

Exit codes: 0 on success, 1 for runtime failures (missing files, bad
checkpoints, training aborts), 2 for usage and input-parse errors
(including malformed scene specs and config files).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import configparser
import math
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import evalkit
from . import model as mdl
from . import pipeline
from . import profiles
from . import report
from . import synthdata
from . import verify as verifymod


class UsageError(ValueError):
    """Bad flag/config combinations detected past argparse."""


_PARSE_ERRORS = (synthdata.SceneSpecError, synthdata.SequenceIOError,
                 evalkit.TraceError, configparser.Error, UsageError)


# ---------------------------------------------------------------------------
# shared helpers

def _sequence_dirs(root: Path) -> list[Path]:
    """The sequence directories under root; root itself may be a sequence."""
    if (root / "meta.txt").exists():
        return [root]
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: no such directory")
    dirs = sorted(d for d in root.iterdir()
                  if d.is_dir() and (d / "meta.txt").exists())
    if not dirs:
        raise UsageError(f"{root}: contains no sequence directories "
                         f"(expected meta.txt inside)")
    return dirs


_TRAIN_KEYS = {
    "epochs": int,
    "pairs_per_epoch": int,
    "learning_rate": float,
    "lr_decay_factor": float,
    "lr_decay_period_epochs": int,
    "warmup_epochs": float,
    "weight_decay": float,
    "seed": int,
}


def _train_config(args) -> pipeline.TrainConfig:
    values: dict = {"epochs": 20, "pairs_per_epoch": 200,
                    "learning_rate": 1e-4}
    if args.config is not None:
        cp = configparser.ConfigParser(interpolation=None)
        cp.read_string(Path(args.config).read_text(), source=str(args.config))
        if not cp.has_section("train"):
            raise UsageError(f"{args.config}: missing [train] section")
        for key, raw in cp["train"].items():
            if key not in _TRAIN_KEYS:
                raise UsageError(f"{args.config}: unknown train key {key!r}")
            try:
                values[key] = _TRAIN_KEYS[key](raw)
            except ValueError:
                raise UsageError(
                    f"{args.config}: key {key!r} wants "
                    f"{_TRAIN_KEYS[key].__name__}, got {raw!r}") from None
    for key in ("epochs", "pairs_per_epoch", "learning_rate", "warmup_epochs",
                "seed"):
        flag = getattr(args, key)
        if flag is not None:
            values[key] = flag
    config = pipeline.TrainConfig(**values)
    try:
        config.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return config


# ---------------------------------------------------------------------------
# synth

def _spec_text(ref: str) -> str:
    """Spec file contents; ``builtin:<name>`` loads a bundled suite."""
    if not ref.startswith("builtin:"):
        return Path(ref).read_text()
    name = ref[len("builtin:"):]
    data = resources.files("rgbdtrack") / "data"
    path = data / f"{name}.spec"
    if not path.is_file():
        available = sorted(p.name[:-5] for p in data.iterdir()
                           if p.name.endswith(".spec"))
        raise UsageError(f"no bundled spec {name!r}; available: {available}")
    return path.read_text()


def cmd_synth(args) -> int:
    specs = synthdata.parse_scene_specs(_spec_text(args.spec))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for spec in specs:
        seq = synthdata.generate(spec, args.seed)
        synthdata.write_sequence(seq, out / spec.name)
        print(f"wrote {out / spec.name} ({len(seq)} frames)")
    return 0


# ---------------------------------------------------------------------------
# train

def cmd_train(args) -> int:
    prof = profiles.get_profile(args.profile)
    config = _train_config(args)
    dataset = [synthdata.read_sequence(d)
               for d in _sequence_dirs(Path(args.data))]
    net = mdl.TrackerModel(prof, seed=config.seed, fuse_mode=args.fuse)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = pipeline.train(net, dataset, config,
                           log_path=out / "loss.log",
                           checkpoint_path=out / "model.ckpt")
    report.loss_figure(report.parse_loss_log(lines), out / "loss.png")
    print(f"trained {config.epochs} epochs on {len(dataset)} sequences "
          f"({args.fuse} fusion, {prof.name} profile)")
    print(f"final epoch: {lines[-1]}")
    print(f"wrote {out / 'model.ckpt'}, {out / 'loss.log'}, {out / 'loss.png'}")
    return 0


# ---------------------------------------------------------------------------
# track

def _track_sequence_job(job: tuple) -> str:
    seq_dir, checkpoint, profile_name, fuse, seed, gate, out_path = job
    prof = profiles.get_profile(profile_name)
    net = mdl.TrackerModel(prof, seed=0, fuse_mode=fuse)
    net.load(checkpoint)
    seq = synthdata.read_sequence(seq_dir)
    if not seq.visible[0] or seq.gt_boxes[0] is None:
        raise ValueError(f"{seq_dir}: first frame has no visible target "
                         f"to initialize from")
    state = pipeline.init_tracker(
        seq.rgb[0], seq.depth[0], seq.gt_boxes[0], net, seed=seed,
        memory_capacity=prof.memory_capacity,
        confidence_gate=prof.confidence_gate if gate is None else gate)
    boxes = [np.asarray(seq.gt_boxes[0], dtype=np.float64).copy()]
    confidences = [1.0]
    for t in range(1, len(seq)):
        box, confidence, state = pipeline.track_step(
            state, seq.rgb[t], seq.depth[t], net)
        boxes.append(box)
        confidences.append(min(max(confidence, 0.0), 1.0))
    evalkit.write_trace(evalkit.PredictionTrace(boxes, confidences), out_path)
    return f"wrote {out_path} ({len(seq)} frames)"


def cmd_track(args) -> int:
    seq_dirs = _sequence_dirs(Path(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(str(d), args.checkpoint, args.profile, args.fuse, args.seed,
             args.gate, str(out / f"{d.name}.txt")) for d in seq_dirs]
    if args.jobs > 1 and len(jobs) > 1:
        with concurrent.futures.ProcessPoolExecutor(
                max_workers=args.jobs) as pool:
            for message in pool.map(_track_sequence_job, jobs):
                print(message)
    else:
        for job in jobs:
            print(_track_sequence_job(job))
    return 0


# ---------------------------------------------------------------------------
# eval

def _success_overlaps(trace: evalkit.PredictionTrace, gt, visible):
    out = []
    for box, g, vis in zip(trace.boxes, gt, visible):
        if vis:
            out.append(evalkit.iou(box, g) if box is not None else 0.0)
    return out


def cmd_eval(args) -> int:
    seq_dirs = _sequence_dirs(Path(args.data))
    traces_dir = Path(args.traces)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    names, tag_sets, peak_fs, aucs, overlaps = [], [], [], [], []
    pr_stack, re_stack, succ_stack = [], [], []
    for d in seq_dirs:
        trace_path = traces_dir / f"{d.name}.txt"
        if not trace_path.exists():
            raise ValueError(f"no trace for sequence {d.name!r} "
                             f"at {trace_path}")
        gt, visible, tags = synthdata.read_annotations(d)
        trace = evalkit.read_trace(trace_path)
        pr_c, re_c, f_c, peak_f, _ = evalkit.pr_re_f(trace, gt, visible)
        succ_c, auc = evalkit.success_auc(_success_overlaps(trace, gt,
                                                            visible))
        names.append(d.name)
        tag_sets.append(tags)
        peak_fs.append(peak_f)
        aucs.append(auc)
        overlaps.append(evalkit.mean_overlap(trace, gt, visible))
        pr_stack.append(pr_c.values)
        re_stack.append(re_c.values)
        succ_stack.append(succ_c.values)

    # aggregate protocol: average the per-sequence precision/recall curves
    # over sequences, then take F of the averaged curves and its peak
    taus = evalkit.sweep_thresholds()
    pr_mean = np.mean(pr_stack, axis=0)
    re_mean = np.mean(re_stack, axis=0)
    f_mean = np.array([evalkit.f_score(p, r)
                       for p, r in zip(pr_mean, re_mean)])
    peak_idx = max(range(len(taus)), key=lambda i: (f_mean[i], -i))
    agg_peak_f = float(f_mean[peak_idx])
    agg_peak_tau = float(taus[peak_idx])
    pr_curve = evalkit.MetricCurve(taus, pr_mean, float(pr_mean[peak_idx]))
    re_curve = evalkit.MetricCurve(taus, re_mean, float(re_mean[peak_idx]))
    f_curve = evalkit.MetricCurve(taus, f_mean, agg_peak_f)
    succ_mean = np.mean(succ_stack, axis=0)
    mean_auc = math.fsum(aucs) / len(aucs)
    succ_curve = evalkit.MetricCurve(np.linspace(0.0, 1.0,
                                                 evalkit.SWEEP_POINTS),
                                     succ_mean, mean_auc)

    mean_ov = math.fsum(overlaps) / len(overlaps)
    rows = [("peak_f", "all", agg_peak_f),
            ("peak_tau", "all", agg_peak_tau),
            ("auc", "all", mean_auc),
            ("overlap", "all", mean_ov)]
    for metric, scores in (("peak_f", peak_fs), ("auc", aucs),
                           ("overlap", overlaps)):
        rows += [(metric, tag, value)
                 for tag, value in evalkit.attribute_report(scores, tag_sets)]
        rows += [(metric, f"seq:{n}", v) for n, v in zip(names, scores)]

    report.write_metric_lines(out / "report.csv", rows)
    report.write_curve_dump(out / "curves.csv", pr_curve, re_curve, f_curve)
    if args.figures:
        report.prf_figure(pr_curve, re_curve, f_curve, agg_peak_f,
                          agg_peak_tau, out / "prf.png")
        report.success_figure(succ_curve, mean_auc, out / "success.png")

    lines = [f"sequences evaluated: {len(names)}",
             f"aggregate peak F: {agg_peak_f:.3f} (tau = {agg_peak_tau:.2f})",
             f"mean success AUC: {mean_auc:.3f}",
             f"mean overlap: {mean_ov:.3f}", "",
             "per-sequence (peak F / AUC / overlap):"]
    for n, pf, a, ov in zip(names, peak_fs, aucs, overlaps):
        lines.append(f"  {n:24s} {pf:.3f}  {a:.3f}  {ov:.3f}")
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for line in lines[:4]:
        print(line)
    print(f"wrote {out / 'report.csv'}, {out / 'curves.csv'}, "
          f"{out / 'report.txt'}"
          + (f", {out / 'prf.png'}, {out / 'success.png'}"
             if args.figures else ""))
    return 0


# ---------------------------------------------------------------------------
# verify

def cmd_verify(args) -> int:
    scopes = (("tables", "gradcheck", "metrics") if args.scope == "all"
              else (args.scope,))
    all_ok = True

    if "tables" in scopes:
        rows = verifymod.check_tables()
        bad = [r for r in rows if not r.ok]
        for r in rows:
            if not r.matches and r.consistent:
                print(f"FAIL table row {r.table}/{r.method}: printed F "
                      f"{r.f_printed:.3f}, recomputed {r.f_recomputed:.3f}")
            elif not r.matches:
                print(f"NOTE {r.table}/{r.method}: printed F "
                      f"{r.f_printed:.3f} vs recomputed {r.f_recomputed:.3f} "
                      f"(documented source inconsistency)")
            elif not r.consistent:
                print(f"FAIL table row {r.table}/{r.method}: expected a "
                      f"documented inconsistency but values agree")
        n_match = sum(r.matches for r in rows)
        status = "PASS" if not bad else "FAIL"
        print(f"{status} tables: {n_match}/{len(rows)} printed F values "
              f"match recomputation; {len(rows) - n_match} documented "
              f"inconsistencies confirmed")
        all_ok &= not bad

    if "gradcheck" in scopes:
        checks = verifymod.check_gradients()
        for c in checks:
            status = "PASS" if c.ok else "FAIL"
            print(f"{status} gradcheck {c.name}: max rel err "
                  f"{c.max_rel_err:.3e} (tol {verifymod.GRADCHECK_TOLERANCE:g},"
                  f" {c.seconds:.2f}s)")
        all_ok &= all(c.ok for c in checks)

    if "metrics" in scopes:
        checks = verifymod.check_metrics(n_instances=args.instances)
        for c in checks:
            if not c.ok:
                print(f"FAIL metric {c.name}: {c.detail}")
        n_ok = sum(c.ok for c in checks)
        status = "PASS" if n_ok == len(checks) else "FAIL"
        print(f"{status} metrics: {n_ok}/{len(checks)} sweep comparisons "
              f"and AUC identities hold exactly")
        all_ok &= n_ok == len(checks)

    return 0 if all_ok else 1


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rgbdtrack",
        description="RGBD tracking with attention fusion: synthetic data, "
                    "training, tracking, evaluation, self-checks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render sequences from a scene spec")
    p.add_argument("--spec", required=True, help="scene spec file "
                   "(ini-style sections, one per sequence)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on sequence directories")
    p.add_argument("--data", required=True,
                   help="directory of sequences (or a single sequence)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--profile", default="desk",
                   choices=sorted(profiles.PROFILES))
    p.add_argument("--fuse", default="full", choices=mdl.FUSE_MODES)
    p.add_argument("--config", default=None,
                   help="ini file with a [train] section")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--pairs-per-epoch", type=int, default=None,
                   dest="pairs_per_epoch")
    p.add_argument("--learning-rate", type=float, default=None,
                   dest="learning_rate")
    p.add_argument("--warmup-epochs", type=float, default=None,
                   dest="warmup_epochs",
                   help="epochs of linear learning-rate warmup")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="run the tracker, write traces")
    p.add_argument("--data", required=True,
                   help="directory of sequences (or a single sequence)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory for traces")
    p.add_argument("--profile", default="desk",
                   choices=sorted(profiles.PROFILES))
    p.add_argument("--fuse", default="full", choices=mdl.FUSE_MODES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gate", type=float, default=None,
                   help="confidence gate for memory updates "
                        "(default: profile value)")
    p.add_argument("--jobs", type=int, default=1,
                   help="sequences tracked in parallel")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score traces against ground truth")
    p.add_argument("--data", required=True,
                   help="directory of sequences (or a single sequence)")
    p.add_argument("--traces", required=True,
                   help="directory holding <sequence>.txt traces")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--no-figures", dest="figures", action="store_false",
                   help="skip rendering png figures")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run built-in self-checks")
    p.add_argument("--scope", default="all",
                   choices=("tables", "gradcheck", "metrics", "all"))
    p.add_argument("--instances", type=int, default=20,
                   help="random instances for the metrics scope")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _PARSE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ckpt.CheckpointError, pipeline.TrainingError, OSError,
            ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
