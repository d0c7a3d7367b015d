"""Command-line driver: dataset synthesis, training, evaluation, ERF
analysis and artifact verification.

Exit codes: 0 success, 2 config error, 3 numeric divergence, 4 failed
ordering/verification assertion.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_ASSERTION = 4


def _pin_threads(argv):
    """Set BLAS thread env vars before numpy is imported anywhere."""
    threads = None
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif a.startswith("--threads="):
            threads = a.split("=", 1)[1]
    if threads is not None:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS"):
            os.environ[var] = threads


def _build_parser():
    p = argparse.ArgumentParser(prog="erfseg", description=__doc__)
    p.add_argument("--seed", type=int, default=0, help="master RNG seed")
    p.add_argument("--threads", type=int, default=0,
                   help="BLAS thread count (1 = fully deterministic mode; 0 = library default)")
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--config", type=Path, default=None, help="TOML run config")
    sp.add_argument("--out", type=Path, required=True)

    tp = sub.add_parser("train", help="train a network variant")
    tp.add_argument("--config", type=Path, default=None)
    tp.add_argument("--data", type=Path, required=True, help="dataset dir (index.csv)")
    tp.add_argument("--out", type=Path, required=True)
    tp.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")

    ep = sub.add_parser("eval", help="evaluate a checkpoint")
    ep.add_argument("--checkpoint", type=Path, required=True)
    ep.add_argument("--data", type=Path, required=True)
    ep.add_argument("--out", type=Path, required=True)
    ep.add_argument("--split", default="test")
    ep.add_argument("--attention-maps", action="store_true",
                    help="export per-stage attention maps (TSR1 + PGM)")

    rp = sub.add_parser("erf", help="measure effective receptive fields")
    rp.add_argument("--arch", choices=("plain", "dilated", "residual"), required=True)
    rp.add_argument("--depth", type=int, default=5)
    rp.add_argument("--depths", default=None, help="comma list for ratio sweeps, e.g. 5,10,20")
    rp.add_argument("--dilation", type=int, default=1)
    rp.add_argument("--channels", type=int, default=8)
    rp.add_argument("--size", type=int, default=64)
    rp.add_argument("--samples", type=int, default=32)
    rp.add_argument("--seeds", type=int, default=3, help="number of seeds, starting at --seed")
    rp.add_argument("--baseline", choices=("plain", "dilated", "residual"), default=None)
    rp.add_argument("--baseline-dilation", type=int, default=1)
    rp.add_argument("--expect", choices=("larger", "smaller-or-equal", "ratio-decreasing"),
                    default=None, help="ordering assertion reflected in the exit code")
    rp.add_argument("--out", type=Path, required=True)

    vp = sub.add_parser("verify", help="check that a manifest's artifacts are intact")
    vp.add_argument("--manifest", type=Path, required=True)
    return p


def _load_toml(path):
    if path is None:
        return {}
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _apply_overrides(config: dict, extras) -> dict:
    """Apply --section.key value/--section.key=value overrides."""
    i = 0
    while i < len(extras):
        item = extras[i]
        if not (item.startswith("--") and "." in item):
            raise SystemExit(f"unrecognized argument: {item}")
        key = item[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extras):
                raise SystemExit(f"missing value for {item}")
            value = extras[i + 1]
            i += 2
        section, name = key.split(".", 1)
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        config.setdefault(section, {})[name] = parsed
    return config


class Manifest:
    """Run manifest written atomically at start and finalized at exit."""

    def __init__(self, path: Path, command: str, config: dict, seed: int):
        from . import __version__

        self.path = path
        self.t0 = time.perf_counter()
        self.payload = {
            "command": command,
            "config": config,
            "seed": seed,
            "outputs": [],
            "wall_clock_s": None,
            "param_count": None,
            "code_version": __version__,
        }

    def plan(self, *paths):
        from .fileio import write_json_atomic

        for p in paths:
            self.payload["outputs"].append({"path": str(p), "sha256": None})
        write_json_atomic(self.path, self.payload)

    def finalize(self, param_count=None):
        from .fileio import sha256_file, write_json_atomic

        for entry in self.payload["outputs"]:
            if Path(entry["path"]).exists():
                entry["sha256"] = sha256_file(entry["path"])
        self.payload["wall_clock_s"] = round(time.perf_counter() - self.t0, 3)
        if param_count is not None:
            self.payload["param_count"] = param_count
        write_json_atomic(self.path, self.payload)


def _dtype(args):
    import numpy as np

    return np.float64 if args.precision == "f64" else np.float32


def _synth_config(config: dict):
    from .synth import SyntheticTaskConfig

    data = dict(config.get("data", {}))
    data.pop("kind", None)
    known = {f for f in SyntheticTaskConfig.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise SystemExit(f"unknown [data] keys: {sorted(unknown)}")
    return SyntheticTaskConfig(**data)


def _model_from_config(config: dict, in_channels: int):
    from .network import FPAConfig, NetworkSpec, RFNAConfig, build_unet

    model = dict(config.get("model", {}))
    variant = model.get("variant", "unet")
    spec = NetworkSpec(
        variant=variant,
        base_channels=int(model.get("base_channels", 32)),
        stages=int(model.get("stages", 3)),
        in_channels=int(model.get("in_channels", in_channels)),
        out_channels=int(model.get("out_channels", 1)),
    )
    fpa_cfg = rfna_cfg = None
    if variant == "fpa":
        fpa_cfg = FPAConfig(
            dilation=int(model.get("dilation", 9)),
            depthwise=bool(model.get("depthwise", False)),
            expansion=int(model.get("expansion", 1)),
        )
    elif variant == "rfna":
        rfna_cfg = RFNAConfig(
            ratio=int(model.get("ratio", 8)),
            depthwise=bool(model.get("depthwise", True)),
            expansion=int(model.get("expansion", 4)),
        )
    net = build_unet(spec, fpa_cfg=fpa_cfg, rfna_cfg=rfna_cfg)[0]
    model_json = {
        "variant": variant,
        "base_channels": spec.base_channels,
        "stages": spec.stages,
        "in_channels": spec.in_channels,
        "out_channels": spec.out_channels,
        "dilation": fpa_cfg.dilation if fpa_cfg else None,
        "ratio": rfna_cfg.ratio if rfna_cfg else None,
        "depthwise": (fpa_cfg or rfna_cfg).depthwise if (fpa_cfg or rfna_cfg) else None,
        "expansion": (fpa_cfg or rfna_cfg).expansion if (fpa_cfg or rfna_cfg) else None,
    }
    return net, model_json


def _net_from_model_json(meta: dict):
    config = {"model": {k: v for k, v in meta.items() if v is not None}}
    return _model_from_config(config, meta["in_channels"])[0]


MODEL_META_KEY = "meta.model_json"
OPT_META_KEY = "meta.optim"


def _checkpoint_payload(result, model_json, dtype):
    import numpy as np

    payload = {}
    payload[MODEL_META_KEY] = np.frombuffer(
        json.dumps(model_json).encode("utf-8"), dtype=np.uint8
    ).astype(np.float64)
    payload[OPT_META_KEY] = np.array(
        [result.start_epoch + len(result.curves), result.state.t, result.best_val_iou],
        dtype=np.float64,
    )
    for name, t in result.final_params.items():
        payload[f"param.{name}"] = t.data
    for name, t in result.best_params.items():
        payload[f"best.{name}"] = t.data
    for name, arr in result.state.m.items():
        payload[f"optim.m.{name}"] = arr
    for name, arr in result.state.v.items():
        payload[f"optim.v.{name}"] = arr
    return payload


def _read_checkpoint(path):
    import numpy as np

    from .fileio import read_ckpt

    raw = read_ckpt(path)
    if MODEL_META_KEY not in raw:
        raise SystemExit(f"{path} is not an erfseg checkpoint (missing model meta)")
    meta = json.loads(bytes(raw[MODEL_META_KEY].astype(np.uint8)).decode("utf-8"))
    return raw, meta


def cmd_synth(args, config):
    from .synth import gen_synthetic, save_dataset

    cfg = _synth_config(config)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out / "manifest.json", "synth", config, args.seed)
    ds = gen_synthetic(cfg, args.seed)
    index = save_dataset(ds, out)
    paths = [index] + [
        out / f"{s.case_id}_{kind}.tsr" for s in ds.samples for kind in ("img", "msk")
    ]
    manifest.plan(*paths)
    manifest.finalize()
    print(f"wrote {len(ds.samples)} cases to {out}")
    return EXIT_OK


def _train_config(config: dict, seed: int):
    from .train import TrainConfig

    tr = dict(config.get("train", {}))
    preset = tr.pop("preset", None)
    tr.setdefault("seed", seed)
    if "batch" in tr:
        tr["batch_size"] = tr.pop("batch")
    if "lr" in tr:
        tr["learning_rate"] = tr.pop("lr")
    if "hflip" in tr:
        tr["augment_hflip_prob"] = tr.pop("hflip")
    if preset:
        return TrainConfig.preset(preset, **tr)
    return TrainConfig(**tr)


def cmd_train(args, config):
    import csv

    import numpy as np

    from .fileio import write_ckpt
    from .layers import init_params
    from .synth import load_dataset
    from .train import OptimizerState, evaluate, train

    ds = load_dataset(args.data)
    sample = ds.samples[0]
    net, model_json = _model_from_config(config, in_channels=sample.image.shape[0])
    cfg = _train_config(config, args.seed)
    dtype = _dtype(args)

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.ckpt"
    curves_path = out / "curves.csv"
    metrics_path = out / "metrics.csv"
    manifest = Manifest(out / "manifest.json", "train", config, cfg.seed)
    manifest.plan(ckpt_path, curves_path, metrics_path)

    params = init_params(net, cfg.seed, dtype=dtype)
    state = OptimizerState()
    start_epoch = 0
    prior_rows = []
    if args.resume:
        raw, meta = _read_checkpoint(args.resume)
        if meta["variant"] != model_json["variant"]:
            raise SystemExit(
                f"resume variant {meta['variant']!r} != configured {model_json['variant']!r}"
            )
        params.load_state({k[6:]: v for k, v in raw.items() if k.startswith("param.")})
        state = OptimizerState(
            m={k[8:]: v.astype(dtype) for k, v in raw.items() if k.startswith("optim.m.")},
            v={k[8:]: v.astype(dtype) for k, v in raw.items() if k.startswith("optim.v.")},
            t=int(raw[OPT_META_KEY][1]),
        )
        start_epoch = int(raw[OPT_META_KEY][0])
        prior_curves = Path(args.resume).parent / "curves.csv"
        if prior_curves.exists():
            with open(prior_curves, newline="") as fh:
                prior_rows = [row for row in csv.reader(fh)][1:]

    print(f"variant={model_json['variant']} params={params.count():,}")

    def log(stats):
        vi = "-" if stats.val_iou is None else f"{stats.val_iou:.4f}"
        print(f"epoch {stats.epoch:3d}  loss {stats.train_loss:.4f}  val_iou {vi}", flush=True)

    result = train(net, ds, cfg, params=params, state=state, start_epoch=start_epoch, log=log)

    write_ckpt(ckpt_path, _checkpoint_payload(result, model_json, dtype))
    with open(curves_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_iou", "val_hd95", "val_fn"])
        w.writerows(prior_rows)
        for s in result.curves:
            w.writerow(
                [s.epoch, f"{s.train_loss:.6f}"]
                + ["" if v is None else f"{v:.6f}" for v in (s.val_iou, s.val_hd95, s.val_fn)]
            )
    eval_cases = ds.cases("test") or ds.cases("val")
    report = evaluate(net, result.best_params, eval_cases, cfg.batch_size)
    report.to_csv(metrics_path)
    print(report.summary())
    manifest.finalize(param_count=params.count())
    return EXIT_OK


def cmd_eval(args, config):
    import numpy as np

    from .fileio import difference_map, write_pgm16, write_ppm, write_tsr
    from .layers import init_params
    from .metrics import binarize
    from .synth import load_dataset
    from .tensor import Tensor
    from .train import evaluate

    raw, meta = _read_checkpoint(args.checkpoint)
    net = _net_from_model_json(meta)
    ds = load_dataset(args.data)
    cases = ds.cases(args.split)
    if not cases:
        raise SystemExit(f"dataset has no {args.split!r} split")
    if cases[0].image.shape[0] != meta["in_channels"]:
        raise SystemExit(
            f"checkpoint expects {meta['in_channels']} channels, data has {cases[0].image.shape[0]}"
        )
    dtype = _dtype(args)
    params = init_params(net, 0, dtype=dtype)
    source = "best." if any(k.startswith("best.") for k in raw) else "param."
    params.load_state({k[len(source):]: v for k, v in raw.items() if k.startswith(source)})

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    manifest = Manifest(out / "manifest.json", "eval", config, args.seed)
    report = evaluate(net, params, cases)
    report.to_csv(metrics_path)
    planned = [metrics_path]
    for c in cases:
        xb = Tensor(c.image[None].astype(dtype))
        if args.attention_maps and net.is_attention:
            logits, triples = net.forward(params, xb, capture=True)
            for si, (f, a, y) in enumerate(triples, 1):
                base = out / f"{c.case_id}_attn_stage{si}"
                write_tsr(base.with_suffix(".tsr"), a.data[0])
                write_pgm16(base.with_suffix(".pgm"), a.data[0].mean(axis=0))
                planned += [base.with_suffix(".tsr"), base.with_suffix(".pgm")]
        else:
            logits = net.forward(params, xb)
        from .tensor import sigmoid

        prob = sigmoid(logits).data[0, 0]
        pred = binarize(prob)
        ppm = out / f"{c.case_id}_diff.ppm"
        write_ppm(ppm, difference_map(pred, c.mask[0] > 0.5))
        planned.append(ppm)
    manifest.plan(*planned)
    manifest.finalize(param_count=params.count())
    print(report.summary())
    return EXIT_OK


def _lab_spec(arch, depth, dilation, channels):
    from .erf import LabSpec

    return LabSpec(
        kind=arch,
        depth=depth,
        dilation=dilation if arch == "dilated" else 1,
        channels=channels,
    )


def cmd_erf(args, config):
    import csv

    import numpy as np

    from .erf import erf_report, measure_lab
    from .fileio import write_pgm16, write_tsr

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out / "manifest.json", "erf", config, args.seed)
    csv_path = out / "erf.csv"
    seeds = [args.seed + i for i in range(args.seeds)]
    depths = [int(d) for d in args.depths.split(",")] if args.depths else [args.depth]

    rows = []
    planned = [csv_path]

    def run_spec(arch, dilation, depth):
        spec = _lab_spec(arch, depth, dilation, args.channels)
        radii = []
        for seed in seeds:
            erf_map, rep = measure_lab(spec, args.size, args.samples, seed)
            rows.append(
                [arch, depth, spec.dilation, arch == "residual", seed,
                 rep.rf_extent, rep.erf_radius, f"{rep.ratio:.6f}"]
            )
            pgm = out / f"erf_{arch}_d{depth}_dil{spec.dilation}_s{seed}.pgm"
            tsr = out / f"erf_{arch}_d{depth}_dil{spec.dilation}_s{seed}.tsr"
            write_pgm16(pgm, erf_map.grid)
            write_tsr(tsr, erf_map.grid)
            planned.extend([pgm, tsr])
            radii.append(rep.erf_radius)
        rows.append(
            [arch, depth, spec.dilation, arch == "residual", "mean",
             spec.rf_extent(), f"{np.mean(radii):.3f}",
             f"{np.mean([(2 * r + 1) / spec.rf_extent() for r in radii]):.6f}"]
        )
        return float(np.mean(radii))

    ok = True
    if args.expect == "ratio-decreasing":
        ratios = []
        for depth in depths:
            mean_radius = run_spec(args.arch, args.dilation, depth)
            rf = _lab_spec(args.arch, depth, args.dilation, args.channels).rf_extent()
            ratios.append((2 * mean_radius + 1) / rf)
        ok = all(b < a for a, b in zip(ratios, ratios[1:]))
        print("ratios by depth:", [f"{r:.4f}" for r in ratios], "decreasing:", ok)
    else:
        mean_a = run_spec(args.arch, args.dilation, depths[0])
        if args.baseline:
            mean_b = run_spec(args.baseline, args.baseline_dilation, depths[0])
            if args.expect == "larger":
                ok = mean_a > mean_b
            elif args.expect == "smaller-or-equal":
                ok = mean_a <= mean_b
            print(f"mean radius {args.arch}={mean_a:.2f} {args.baseline}={mean_b:.2f} ok={ok}")

    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arch", "depth", "dilation", "residual", "seed",
                    "rf_extent", "erf_radius", "ratio"])
        w.writerows(rows)
    manifest.plan(*planned)
    manifest.finalize()
    return EXIT_OK if ok else EXIT_ASSERTION


def cmd_verify(args, config):
    from .fileio import sha256_file

    manifest = json.loads(Path(args.manifest).read_text())
    bad = []
    for entry in manifest.get("outputs", []):
        p = Path(entry["path"])
        if not p.exists():
            bad.append(f"missing: {p}")
        elif entry.get("sha256") and sha256_file(p) != entry["sha256"]:
            bad.append(f"checksum mismatch: {p}")
    for line in bad:
        print(line)
    print(f"verify: {len(manifest.get('outputs', []))} artifacts, {len(bad)} problems")
    return EXIT_OK if not bad else EXIT_ASSERTION


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    _pin_threads(argv)
    parser = _build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        config = _apply_overrides(_load_toml(getattr(args, "config", None)), extras)
    except SystemExit as e:
        print(e, file=sys.stderr)
        return EXIT_CONFIG

    from .errors import ConfigError, DivergenceError, ShapeError

    handlers = {
        "synth": cmd_synth,
        "train": cmd_train,
        "eval": cmd_eval,
        "erf": cmd_erf,
        "verify": cmd_verify,
    }
    try:
        return handlers[args.command](args, config)
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ShapeError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:
        if isinstance(e.code, int):
            return e.code
        print(e, file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
