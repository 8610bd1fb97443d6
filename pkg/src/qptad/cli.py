"""Command-line entry points: synthetic data, training, inference, evaluation, gradient check, scan benchmark.

Every command takes ``--config``, ``--seed`` and ``--out`` plus the ablation
overrides ``--beta --nq --ns --layers --mamba-blocks``; all randomness is
derived from the single seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .decoder import ActionDecoder, DecoderConfig
from .errors import ConfigError
from .evaluator import VideoSetMismatchError, evaluate_corpus, write_report
from .inference import build_samples, infer_corpus
from .numerics import grad_check, inject_backward_fault
from .pipeline import (FeatureFormatError, VideoAnnotation, ingest_features, read_annotations,
                       synth_generate, write_annotations, write_features, write_predictions)
from .rng import derive_rng
from .seqblocks import MambaMhsaConfig, SsmParams, conv_apply, discretize, kernel, scan
from .trainer import (AdamW, MatchCostWeights, NonFiniteLossError, TrainState, WindowSample,
                      compute_loss, load_checkpoint, match_layers, read_checkpoint, save_checkpoint, train)

log = logging.getLogger("qptad")

CHECKPOINT = "checkpoint.bin"
TRAIN_LOG = "train_log.csv"
PREDICTIONS = "predictions.json"
REPORT = "report.json"
ANNOTATIONS = "annotations.json"
MANIFEST = "manifest.json"
FEATURE_DIR = "features"
FEATURE_EXT = ".mgft"
BENCH_TOL = 1e-9


class CliError(Exception):
    """A user-facing failure: printed without a traceback, exit code 2."""


# -- helpers --------------------------------------------------------------

def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig().validate()
    return cfg.apply_overrides(beta=args.beta, nq=args.nq, ns=args.ns, layers=args.layers,
                               mamba_blocks=args.mamba_blocks, seed=args.seed)


def out_dir(args) -> Path:
    path = Path(args.out)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {path}: {exc}") from exc
    return path


def build_model(cfg: RunConfig) -> ActionDecoder:
    return ActionDecoder(derive_rng(cfg.seed, "weights"), cfg.decoder)


def load_features(data_dir: Path) -> list:
    feat_dir = data_dir / FEATURE_DIR
    if not feat_dir.is_dir():
        raise CliError(f"no feature directory at {feat_dir}")
    seqs = []
    for path in sorted(feat_dir.glob(f"*{FEATURE_EXT}")):
        try:
            seqs.append(ingest_features(path, path.stem))
        except FeatureFormatError as exc:
            raise CliError(f"{path}: {exc}") from exc
    return seqs


def check_feature_width(seqs, cfg: RunConfig) -> None:
    for s in seqs:
        if s.D_in != cfg.decoder.D_in:
            raise CliError(f"{s.video_id}: feature width {s.D_in} does not match decoder.D_in={cfg.decoder.D_in}")


def model_echo(cfg: RunConfig, model: ActionDecoder) -> dict:
    """Axis values read back from the constructed model, next to the full config."""
    first = model.layers[0]
    return {
        "model": {
            "layers": len(model.layers),
            "queries": int(model.query_embed.data.shape[0]),
            "points_per_query": int(first.N_s),
            "mamba_blocks": len(first.mamba_mhsa.blocks),
            "window_beta": cfg.window.beta,
            "num_parameters": int(sum(p.data.size for p in model.parameters())),
        },
        "config": cfg.to_dict(),
    }


# -- commands -------------------------------------------------------------

def cmd_config(args) -> int:
    cfg = resolve_config(args)
    echo = model_echo(cfg, build_model(cfg))
    text = json.dumps(echo, indent=1, sort_keys=True)
    print(text)
    if args.out:
        (out_dir(args) / "config_echo.json").write_text(text + "\n")
    return 0


def cmd_gen_synth(args) -> int:
    cfg = resolve_config(args)
    out = out_dir(args)
    s = cfg.synth
    pairs = synth_generate(cfg.seed, s.num_videos, cfg.decoder.num_classes, s.noise_level,
                           D_in=cfg.decoder.D_in, num_frames=s.num_frames, min_len=s.min_len, max_len=s.max_len)
    written = []
    try:
        (out / FEATURE_DIR).mkdir(exist_ok=True)
        for seq, _ in pairs:
            rel = f"{FEATURE_DIR}/{seq.video_id}{FEATURE_EXT}"
            write_features(seq, out / rel)
            written.append(rel)
        write_annotations([ann for _, ann in pairs], out / ANNOTATIONS)
        written.append(ANNOTATIONS)
        cfg.dump(out / "config.json")
        written.append("config.json")
        manifest = {"seed": cfg.seed, "num_videos": len(pairs),
                    "files": [{"path": rel, "bytes": (out / rel).stat().st_size} for rel in sorted(written)]}
        (out / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n")
    except OSError as exc:
        raise CliError(f"writing dataset failed at {exc.filename}: {exc.strerror}") from exc
    print(f"wrote {len(pairs)} videos to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    data = Path(args.data)
    seqs = load_features(data)
    if not seqs:
        raise CliError(f"no feature files under {data / FEATURE_DIR}")
    check_feature_width(seqs, cfg)
    gts = read_annotations(data / ANNOTATIONS)
    missing = [s.video_id for s in seqs if s.video_id not in gts]
    if missing:
        raise CliError(f"videos without annotations: {missing}")
    pairs = [(s, gts[s.video_id]) for s in seqs]
    samples = build_samples(pairs, cfg.window.beta, cfg.window.train_overlap)
    if args.steps is not None:
        cfg.schedule.max_steps = args.steps
    cfg.validate()

    out = out_dir(args)
    model = build_model(cfg)
    opt = AdamW(model.parameters(), cfg.schedule.weight_decay)
    names = [n for n, _ in model.named_parameters()]
    state = TrainState()
    if args.resume:
        side = load_checkpoint(model, args.resume)
        opt.load_state_arrays(names, read_checkpoint(args.resume))
        state = TrainState(step=int(side["step"]), epoch=int(side["epoch"]))
        log.info("resumed from %s at step %d", args.resume, state.step)
    cfg.dump(out / "config.json")
    t0 = time.perf_counter()
    try:
        state = train(model, samples, cfg.schedule, cfg.cost, cfg.seed, out / TRAIN_LOG, state, opt)
    except NonFiniteLossError as exc:
        raise CliError(f"training aborted at step {state.step}: {exc}") from exc
    save_checkpoint(model, out / CHECKPOINT,
                    {"config": cfg.to_dict(), "step": state.step, "epoch": state.epoch,
                     "num_windows": len(samples)},
                    extra=opt.state_arrays(names))
    print(f"trained {state.step} steps ({len(samples)} windows) in {time.perf_counter() - t0:.1f}s; "
          f"checkpoint {out / CHECKPOINT}")
    return 0


def cmd_infer(args) -> int:
    side_path = Path(str(args.checkpoint) + ".json")
    if args.config:
        cfg = resolve_config(args)
    elif side_path.exists():
        cfg = RunConfig.from_dict(json.loads(side_path.read_text())["config"])
        cfg.apply_overrides(beta=args.beta, nq=args.nq, ns=args.ns, layers=args.layers,
                            mamba_blocks=args.mamba_blocks, seed=args.seed)
    else:
        raise CliError(f"no config given and no checkpoint sidecar at {side_path}")
    seqs = load_features(Path(args.data))
    check_feature_width(seqs, cfg)
    model = build_model(cfg)
    try:
        load_checkpoint(model, args.checkpoint)
    except (OSError, ValueError) as exc:
        raise CliError(f"{args.checkpoint}: {exc}") from exc
    w = cfg.window
    videos = infer_corpus(model, seqs, beta=w.beta, overlap=w.infer_overlap, score_thresh=w.score_thresh,
                          nms_tiou=w.nms_tiou)
    out = out_dir(args)
    write_predictions(videos, out / PREDICTIONS)
    print(f"wrote {sum(len(v.instances) for v in videos)} detections for {len(videos)} videos to "
          f"{out / PREDICTIONS}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    try:
        report = evaluate_corpus(args.pred, args.gt, cfg.eval)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"evaluation failed: {exc}") from exc
    out = out_dir(args)
    write_report(report, out / REPORT)
    print(f"F1@{cfg.eval.tiou_threshold:g} = {report.f1:.2f}  precision {report.precision:.2f}  "
          f"recall {report.recall:.2f}  (tp {report.tp}, fp {report.fp}, fn {report.fn})")
    return 0


def tiny_decoder_config() -> DecoderConfig:
    """The small configuration the gradient check runs on."""
    return DecoderConfig(L=2, N_q=4, N_s=6, D=16, D_prime=4, num_classes=3, D_in=8,
                         mamba=MambaMhsaConfig(M=1, heads=2, N_state=4)).validate()


def gradcheck_seed(seed: int, max_coords: int = 8):
    """Finite-difference check of the full training loss for one seed, matching held fixed."""
    cfg = tiny_decoder_config()
    model = ActionDecoder(derive_rng(seed, "weights"), cfg)
    feats = derive_rng(seed, "features").normal(size=(16, cfg.D_in))
    sample = WindowSample(feats, np.array([2.0, 9.0]), np.array([6.0, 14.0]), np.array([0, 2]))
    w = MatchCostWeights()
    matches = match_layers(model(feats), sample, w)
    return grad_check(lambda: compute_loss(model(feats), sample, matches, w).total, model.parameters(),
                      max_coords=max_coords, seed=seed)


def cmd_gradcheck(args) -> int:
    seeds = range(args.seed or 0, (args.seed or 0) + args.seeds)
    rows, ok = [], True
    with inject_backward_fault(args.fault_op, args.fault_scale) if args.fault_op else nullcontext():
        for seed in seeds:
            rep = gradcheck_seed(seed, args.max_coords)
            ok &= rep.passed
            print(f"seed {seed}: {rep.summary()}")
            rows.append({"seed": seed, "passed": rep.passed, "max_rel_error": rep.max_rel_error,
                         "worst_param": rep.worst_param, "checked": rep.checked, "unresolved": rep.unresolved})
    worst = max(rows, key=lambda r: r["max_rel_error"])
    print(f"{'PASS' if ok else 'FAIL'}: worst parameter {worst['worst_param']} "
          f"(rel err {worst['max_rel_error']:.3e}, seed {worst['seed']})")
    if args.out:
        (out_dir(args) / "gradcheck.json").write_text(
            json.dumps({"passed": ok, "worst": worst, "seeds": rows}, indent=1) + "\n")
    return 0 if ok else 1


def bench_rows(T_list, n_state: int, repeats: int, seed: int = 0) -> list[dict]:
    """Time scan and kernel+convolution for each length after checking they agree."""
    if repeats < 1:
        raise CliError(f"--repeats must be >= 1, got {repeats}")
    if n_state < 1:
        raise CliError(f"--n-state must be >= 1, got {n_state}")
    rng = derive_rng(seed, "bench")
    rows = []
    for T in T_list:
        if T < 1:
            raise CliError(f"sequence lengths must be positive, got {T}")
        # the stable parameterization the model uses, so long sequences stay bounded
        d_params = SsmParams.default_init(rng, n_state)
        d = discretize(d_params)
        u = rng.normal(size=T)
        y_scan = scan(d, d_params.C, u)
        y_conv = conv_apply(u, kernel(d, d_params.C, T))
        diff = float(np.max(np.abs(y_scan - y_conv)))
        tol = BENCH_TOL * max(1.0, float(np.max(np.abs(y_scan))))
        if not diff <= tol:
            raise CliError(f"scan and convolution disagree at T={T}: max diff {diff:.3e} > {tol:.3e}")
        scan_t, conv_t = [], []
        for _ in range(repeats):
            t = time.perf_counter()
            scan(d, d_params.C, u)
            scan_t.append(time.perf_counter() - t)
            t = time.perf_counter()
            conv_apply(u, kernel(d, d_params.C, T))
            conv_t.append(time.perf_counter() - t)
        rows.append({"T": T, "n_state": n_state, "repeats": repeats, "scan_s": min(scan_t),
                     "conv_s": min(conv_t), "max_abs_diff": diff})
    return rows


def cmd_bench_scan(args) -> int:
    try:
        T_list = [int(x) for x in args.T.split(",") if x.strip()]
    except ValueError as exc:
        raise CliError(f"--T must be a comma-separated list of integers, got {args.T!r}") from exc
    rows = bench_rows(T_list, args.n_state, args.repeats, args.seed or 0)
    fields = ["T", "n_state", "repeats", "scan_s", "conv_s", "max_abs_diff"]
    if args.out:
        with open(out_dir(args) / "bench_scan.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(rows)
    writer = csv.DictWriter(sys.stdout, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return 0


# -- argument parsing -----------------------------------------------------

def _common(out_required: bool) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="single seed for weights, data and shuffling")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--beta", type=int, help="window length in frames")
    p.add_argument("--nq", type=int, help="number of queries")
    p.add_argument("--ns", type=int, help="points per query")
    p.add_argument("--layers", type=int, help="decoder layers")
    p.add_argument("--mamba-blocks", type=int, help="Mamba blocks per sequence block")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qptad", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("config", parents=[_common(False)], help="validate and echo the resolved configuration")
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("gen-synth", parents=[_common(True)], help="write a synthetic feature dataset")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", parents=[_common(True)], help="train a decoder on a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory (features/ and annotations.json)")
    p.add_argument("--steps", type=int, help="stop once the total step count (including resumed steps) reaches this")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[_common(True)], help="run sliding-window inference")
    p.add_argument("--data", required=True, help="dataset directory holding features/")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[_common(True)], help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="predictions JSON")
    p.add_argument("--gt", required=True, help="ground-truth annotations JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[_common(False)], help="finite-difference check on a tiny model")
    p.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds")
    p.add_argument("--max-coords", type=int, default=8, help="coordinates sampled per parameter")
    p.add_argument("--fault-op", help="scale the backward rule of this op (testing the checker)")
    p.add_argument("--fault-scale", type=float, default=1.5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench-scan", parents=[_common(False)], help="time recurrent scan vs kernel convolution")
    p.add_argument("--T", default="64,256,1024,4096", help="comma-separated sequence lengths")
    p.add_argument("--n-state", type=int, default=8)
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench_scan)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, VideoSetMismatchError) as exc:
        print(f"qptad {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
