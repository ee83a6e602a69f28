"""Command-line surface: gen-data, train, eval, gradcheck, ablate.

Exit codes: 0 ok, 1 check failure, 2 usage error, 3 I/O error, 4 numeric
abort. Every command is deterministic given ``--seed``; re-running writes
byte-identical artifacts. ``BAANET_THREADS`` caps evaluation parallelism.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import detector as D
from . import evaluator as E
from . import fileio
from . import gate as G
from . import illumination as IL
from . import losses as L
from . import model as M
from . import synthdata as S
from . import tensor as T
from .config import RunConfig
from .train import evaluate_model, model_from_checkpoint, train_model

EXIT_OK = 0
EXIT_CHECK_FAILURE = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

ABLATE_LEARNING_RATE = 2e-3  # desk-scale nets need a larger step than the full-scale recipe


class UsageError(ValueError):
    pass


def _workers() -> int:
    raw = os.environ.get("BAANET_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"BAANET_THREADS must be an integer, got {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="baanet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="flat-key config file")
        p.add_argument("--seed", type=int, default=None, help="master seed")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")

    p = sub.add_parser("gen-data", help="generate a synthetic paired RGB-T dataset")
    common(p)
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--train-ratio", type=float, default=0.8)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--noise-profile", choices=["default", "none"], default="default")

    p = sub.add_parser("train", help="train one detector")
    common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--mode", choices=list(M.FUSION_MODES), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(p)
    p.add_argument("--module", choices=["all", "ops", "gate", "illum", "model"], default="all")
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("ablate", help="train and compare the three fusion modes")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated training seeds")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=ABLATE_LEARNING_RATE)
    p.add_argument("--batch-size", type=int, default=None)
    return parser


def _load_run_config(args, **overrides) -> RunConfig:
    flat: dict[str, str] = {}
    if args.config is not None:
        if not args.config.exists():
            raise FileNotFoundError(f"config file not found: {args.config}")
        flat.update(fileio.parse_config_text(args.config.read_text()))
    if args.seed is not None:
        flat["run.seed"] = str(args.seed)
    for key, value in overrides.items():
        if value is not None:
            flat[key] = str(value)
    return RunConfig.from_flat(flat)


def _require_dataset(path: Path) -> S.Dataset:
    try:
        return S.load_dataset(path)
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"dataset not found: {exc}") from exc


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    profile = S.NoiseProfile.default() if args.noise_profile == "default" else S.NoiseProfile.none()
    ds = S.make_dataset(
        args.out,
        args.n,
        train_ratio=args.train_ratio,
        profile=profile,
        seed=args.seed if args.seed is not None else 0,
        image_size=args.image_size,
    )
    n_train = len(ds.entries("train"))
    n_test = len(ds.entries("test"))
    n_day = sum(1 for r in ds.records if r.illumination == "day")
    n_boxes = sum(len(r.ground_truths) for r in ds.records)
    if not args.quiet:
        print(f"wrote {len(ds.records)} samples to {ds.root} "
              f"(train={n_train}, test={n_test}, day={n_day}, night={len(ds.records) - n_day}, boxes={n_boxes})")
    return EXIT_OK


def cmd_train(args) -> int:
    run_cfg = _load_run_config(
        args,
        **{
            "run.fusion_mode": args.mode,
            "run.epochs": args.epochs,
            "run.batch_size": args.batch_size,
            "run.learning_rate": args.lr,
        },
    )
    dataset = _require_dataset(args.data)
    outcome = train_model(run_cfg, dataset, args.out, quiet=args.quiet)
    if not args.quiet:
        print(f"checkpoint: {outcome.checkpoint_path}")
        print(f"metrics:    {outcome.metrics_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint.exists():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    dataset = _require_dataset(args.data)
    ck = fileio.load_checkpoint(args.checkpoint)
    net, run_cfg = model_from_checkpoint(ck, dataset.image_size)
    if not dataset.entries(args.split):
        raise UsageError(f"dataset split {args.split!r} is empty")
    result, detections = evaluate_model(
        net, dataset, run_cfg.eval, split=args.split, batch_size=run_cfg.batch_size, workers=_workers()
    )
    args.out.mkdir(parents=True, exist_ok=True)
    E.write_detections(args.out / "detections.csv", detections)
    (args.out / "eval.csv").write_text(E.eval_result_to_csv(result))
    for name in (s for s in E.SUBSET_ORDER if s in result.subsets):
        print(f"mr2[{name}] = {result.subsets[name].mr2:.6f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    dataset = _require_dataset(args.data)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    if not seeds:
        raise UsageError("--seeds must name at least one seed")

    results: dict[tuple[str, int], E.EvalResult] = {}
    for mode in M.FUSION_MODES:
        for seed in seeds:
            run_cfg = _load_run_config(
                args,
                **{
                    "run.fusion_mode": mode,
                    "run.epochs": args.epochs,
                    "run.batch_size": args.batch_size,
                    "run.learning_rate": args.lr,
                    "run.seed": seed,
                },
            )
            run_dir = args.out / f"{mode}_s{seed}"
            if not args.quiet:
                print(f"--- training {mode} (seed {seed})")
            outcome = train_model(run_cfg, dataset, run_dir, quiet=True)
            result, _ = evaluate_model(
                outcome.net, dataset, run_cfg.eval, batch_size=run_cfg.batch_size, workers=_workers()
            )
            results[(mode, seed)] = result
            if not args.quiet:
                mr2 = result.subsets["all"].mr2
                print(f"    mr2[all] = {mr2:.4f}")

    subsets = [s for s in E.SUBSET_ORDER if any(s in r.subsets for r in results.values())]
    lines = ["mode,subset,seed,mr2"]
    for mode in M.FUSION_MODES:
        for subset in subsets:
            for seed in seeds:
                r = results[(mode, seed)]
                if subset in r.subsets:
                    lines.append(f"{mode},{subset},{seed},{r.subsets[subset].mr2!r}")
    for mode in M.FUSION_MODES:
        for subset in subsets:
            vals = [
                results[(mode, seed)].subsets[subset].mr2
                for seed in seeds
                if subset in results[(mode, seed)].subsets
            ]
            if vals:
                lines.append(f"{mode},{subset},mean,{float(np.mean(vals))!r}")
                lines.append(f"{mode},{subset},spread,{float(max(vals) - min(vals))!r}")
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "ablation.csv").write_text("\n".join(lines) + "\n")
    if not args.quiet:
        for mode in M.FUSION_MODES:
            vals = [results[(mode, seed)].subsets["all"].mr2 for seed in seeds]
            print(f"{mode}: mean mr2[all] = {float(np.mean(vals)):.4f} (spread {max(vals) - min(vals):.4f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Gradient checking command


def _op_checks(rng: np.random.Generator):
    """One (name, loss_fn, store) triple per primitive op; inputs are parameters."""
    checks = []

    def probe_loss(out: T.Tensor, key: str, cache={}) -> T.Tensor:
        if key not in cache:
            cache[key] = np.random.default_rng(hash(key) % 2**32).standard_normal(out.dims)
        return T.sum_all(T.mul_elementwise(out, T.Tensor(cache[key])))

    def add_check(name, store, make_out):
        checks.append((name, lambda: probe_loss(make_out(), name), store))

    st = T.ParameterStore()
    x = st.add("x", rng.uniform(-2, 2, (2, 3, 6, 6)))
    w = st.add("w", rng.uniform(-1, 1, (4, 3, 3, 3)))
    b = st.add("b", rng.uniform(-0.5, 0.5, 4))
    add_check("conv2d", st, lambda: T.conv2d(x, w, b, stride=1, pad=1))

    st2 = T.ParameterStore()
    x2 = st2.add("x", rng.uniform(-2, 2, (2, 4, 6, 6)))
    add_check("global_avg_pool", st2, lambda: T.global_avg_pool(x2))
    add_check("avg_pool2x2", st2, lambda: T.avg_pool2x2(x2))

    st3 = T.ParameterStore()
    xf = st3.add("x", rng.uniform(-2, 2, (3, 5)))
    wf = st3.add("w", rng.uniform(-1, 1, (4, 5)))
    bf = st3.add("b", rng.uniform(-0.5, 0.5, 4))
    add_check("fully_connected", st3, lambda: T.fully_connected(xf, wf, bf))

    st4 = T.ParameterStore()
    xa = st4.add("x", rng.uniform(-2, 2, (3, 7)))
    for kind in ("sigmoid", "relu", "softmax_lastdim"):
        add_check(f"activate[{kind}]", st4, lambda kind=kind: T.activate(xa, kind))

    st5 = T.ParameterStore()
    ca = st5.add("a", rng.uniform(-2, 2, (2, 3, 4, 4)))
    cb = st5.add("b", rng.uniform(-2, 2, (2, 3, 4, 4)))
    cg = st5.add("gate_c", rng.uniform(0.1, 0.9, (2, 3, 1, 1)))
    sg = st5.add("gate_s", rng.uniform(0.1, 0.9, (2, 1, 4, 4)))
    add_check("combine[add]", st5, lambda: T.add(ca, cb))
    add_check("combine[mul_elementwise]", st5, lambda: T.mul_elementwise(ca, cb))
    add_check("combine[mul_channelwise]", st5, lambda: T.mul_channelwise(cg, ca))
    add_check("combine[mul_spatialwise]", st5, lambda: T.mul_spatialwise(sg, ca))
    add_check("combine[concat_channels]", st5, lambda: T.concat_channels(ca, cb))

    st6 = T.ParameterStore()
    xr = st6.add("x", rng.uniform(0, 1, (1, 2, 6, 7)))
    add_check("resize_bilinear", st6, lambda: IL.resize_bilinear(xr, 5))
    return checks


def _gate_check(rng: np.random.Generator):
    store = T.ParameterStore()
    params = G.GateParams.create(store, "gate", 4, 4, rng)
    r = store.add("input.r", rng.uniform(-2, 2, (1, 4, 6, 6)))
    t = store.add("input.t", rng.uniform(-2, 2, (1, 4, 6, 6)))
    n_scores = 2 * 4 * 6 * 6
    labels = -rng.integers(0, 2, (1, n_scores))  # mix of positives (0) and negatives (-1)
    lcfg = L.LossConfig()
    probe = rng.standard_normal((1, 2 * 4, 6, 6))

    def loss_fn():
        out = G.gate_forward(r, t, params, 0.3, 0.7)
        merged = T.mul_elementwise(T.concat_channels(out.r_out, out.t_out), T.Tensor(probe))
        scores = T.sigmoid(T.reshape(merged, (1, n_scores)))
        return L.focal_loss(scores, labels, lcfg)

    return loss_fn, store


def _illum_check(rng: np.random.Generator):
    store = T.ParameterStore()
    cfg = IL.IllumConfig()
    params = IL.IllumNetParams.create(store, cfg, rng)
    rgb = T.Tensor(rng.uniform(0, 1, (1, 3, 32, 32)))
    tir = T.Tensor(rng.uniform(0, 1, (1, 1, 32, 32)))

    def loss_fn():
        w_d, w_n = IL.illum_forward(rgb, tir, params, cfg)
        return IL.illum_loss_batch(w_d, w_n, ["night"])

    return loss_fn, store


def _model_check(rng: np.random.Generator):
    net = M.build_model("baa_gate", D.ModelConfig(), IL.IllumConfig(), L.LossConfig(), (32, 32), seed=7)
    spec = S.SceneSpec(
        size=32,
        regime="night",
        objects=(S.ObjectSpec(16.0, 16.0, 6.0, 14.0, 0.4, 0.3),),
        rgb_night_contrast_collapse=0.6,
        rgb_noise_sigma=0.02,
        tir_noise_sigma=0.02,
        seed=11,
    )
    sample = S.render(spec)
    rgb = T.Tensor(sample.rgb.array[None])
    tir = T.Tensor(sample.tir.array[None])
    loss_fn = M.frozen_loss_fn(net, rgb, tir, [sample.ground_truths], [sample.illumination])
    return loss_fn, net.store


def run_gradient_suite(module: str = "all", tolerance: float = 1e-4, quiet: bool = False) -> list[tuple[str, T.GradCheckReport]]:
    """Gradient checks for the requested scope; returns (name, report) pairs."""
    rng = np.random.default_rng(1234)
    reports: list[tuple[str, T.GradCheckReport]] = []
    if module in ("all", "ops"):
        for name, loss_fn, store in _op_checks(rng):
            reports.append((f"op:{name}", T.grad_check(loss_fn, store, tolerance=tolerance)))
    if module in ("all", "gate"):
        loss_fn, store = _gate_check(np.random.default_rng(99))
        reports.append(("gate_forward+focal", T.grad_check(loss_fn, store, tolerance=tolerance)))
    if module in ("all", "illum"):
        loss_fn, store = _illum_check(np.random.default_rng(100))
        reports.append(("illum_forward+loss", T.grad_check(loss_fn, store, tolerance=tolerance, subsample=1500)))
    if module in ("all", "model"):
        loss_fn, store = _model_check(np.random.default_rng(101))
        reports.append(("full_model+total_loss", T.grad_check(loss_fn, store, tolerance=tolerance, subsample=1500)))
    if not quiet:
        for name, report in reports:
            status = "PASS" if report.passed else "FAIL"
            print(f"[{status}] {name}: max rel error {report.max_rel_error:.3e} (tolerance {tolerance:g})")
            if not report.passed:
                worst = report.worst()
                print(f"       worst offender: {worst.name}[{worst.worst_index}] "
                      f"analytic {worst.analytic:.6e} vs numeric {worst.numeric:.6e}")
    return reports


def cmd_gradcheck(args) -> int:
    reports = run_gradient_suite(args.module, args.tolerance, args.quiet)
    return EXIT_OK if all(r.passed for _, r in reports) else EXIT_CHECK_FAILURE


# ---------------------------------------------------------------------------
# Entry


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "eval": cmd_eval,
        "gradcheck": cmd_gradcheck,
        "ablate": cmd_ablate,
    }
    try:
        return handlers[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        print(f"run 'baanet {args.command} --help' for usage", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        if isinstance(exc, fileio.FormatError):
            print(f"format error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (T.NumericError, T.MissingGradientError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
