"""Command-line entry point: ``doei <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 non-finite loss.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import cam, config, experiments, metrics, plots, pnm, scenes
from .doei import ConfigError
from .train import NonFiniteLoss, check_params, load_checkpoint, predict_cams, save_checkpoint, train, write_loss_csv

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class IoFailure(Exception):
    pass


def _load_config(args) -> config.RunConfig:
    cfg = config.load(args.config) if args.config else config.RunConfig().validate()
    if args.set:
        pairs = []
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            pairs.append((k.strip(), v.strip()))
        cfg = config.apply(cfg, pairs)
    return cfg


def _doei_or_none(cfg: config.RunConfig):
    d = cfg.doei
    return d if any(d.is_active(i) for i in range(1, cfg.model.depth + 1)) else None


def _makedirs(path) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {path}: {exc}") from exc


def _samples(cfg: config.RunConfig, manifest: str | None, count: int, start: int):
    if manifest:
        return scenes.load_samples(manifest, cfg.model.num_classes)
    return scenes.generate(cfg.scene_spec(), count, start=start)


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    _makedirs(args.out)
    samples = scenes.generate(cfg.scene_spec(), args.count, start=args.start)
    path = scenes.write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    samples = _samples(cfg, args.manifest, cfg.data.train_count, 0)
    _makedirs(args.out)
    result = train(samples, cfg.model, cfg.train, _doei_or_none(cfg))
    save_checkpoint(os.path.join(args.out, "model.ckpt"), result.params)
    write_loss_csv(os.path.join(args.out, "loss.csv"), result.epoch_losses)
    if result.epoch_losses:
        plots.loss_curve(os.path.join(args.out, "loss.png"), result.epoch_losses)
    final = result.epoch_losses[-1] if result.epoch_losses else result.initial_loss
    print(f"initial loss {result.initial_loss:.6f} final loss {final:.6f}")
    return EXIT_OK


def cmd_cam(args) -> int:
    cfg = _load_config(args)
    try:
        params = load_checkpoint(args.checkpoint)
    except ValueError as exc:
        raise IoFailure(str(exc)) from exc
    check_params(params, cfg.model)
    entries = scenes.read_manifest(args.manifest)
    samples = scenes.load_samples(args.manifest, cfg.model.num_classes)
    for sub in ("heatmaps", "labels", "pseudo"):
        _makedirs(os.path.join(args.out, sub))
    cams = predict_cams(samples, params, cfg.model, _doei_or_none(cfg), cfg.cam.beta)
    size = cfg.model.image_size
    for e, res in zip(entries, cams):
        name = f"{e.index:04d}"
        for c in range(cfg.model.num_classes):
            cam.write_heatmap(os.path.join(args.out, "heatmaps", f"{name}_c{c + 1}.ppm"), res.maps[c], size)
        pnm.write_pgm(os.path.join(args.out, "labels", f"{name}.pgm"), res.label_map)
        pnm.write_pgm(os.path.join(args.out, "pseudo", f"{name}.pgm"), cam.upsample_labels(res.label_map, size))
    print(f"wrote CAM outputs for {len(entries)} images to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    pred_dir = args.pred_dir
    if os.path.isdir(os.path.join(pred_dir, "pseudo")):
        pred_dir = os.path.join(pred_dir, "pseudo")
    samples = scenes.load_samples(args.manifest, cfg.model.num_classes)
    entries = scenes.read_manifest(args.manifest)
    conf = metrics.Confusion(cfg.model.num_classes)
    preds = []
    for e, s in zip(entries, samples):
        pred = pnm.read_pgm(os.path.join(pred_dir, f"{e.index:04d}.pgm"))
        conf.accumulate(pred, s.gt_mask)
        preds.append(pred)
    tex = metrics.texture_fp(preds, [s.texture_mask for s in samples])
    out = args.out or os.path.join(args.pred_dir, "metrics.csv")
    metrics.write_report(out, conf, {"texture_fp": tex})
    m, _ = metrics.miou(conf)
    fp, fn = metrics.fp_fn_rates(conf)
    print(f"miou {m:.6f} fp {fp:.6f} fn {fn:.6f} texture_fp {tex:.6f}")
    return EXIT_OK


def _experiment(cfg: config.RunConfig) -> experiments.Experiment:
    return experiments.Experiment(cfg.model, cfg.train, cfg.doei, cfg.cam.beta)


def _benchmark(cfg: config.RunConfig):
    spec = cfg.scene_spec()
    return scenes.generate(spec, cfg.data.train_count), scenes.generate(spec, cfg.data.eval_count, start=cfg.data.eval_start)


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    _makedirs(args.out)
    train_set, eval_set = _benchmark(cfg)
    results = experiments.ablate(_experiment(cfg), train_set, eval_set, seeds=cfg.seeds)
    experiments.write_ablation_csv(os.path.join(args.out, "ablation.csv"), results)
    experiments.write_ablation_seeds_csv(os.path.join(args.out, "ablation_seeds.csv"), results, cfg.seeds)
    names = [v[0] for v in experiments.VARIANTS]
    means = [experiments.mean_metrics(results[n]) for n in names]
    plots.ablation_bars(
        os.path.join(args.out, "ablation.png"),
        names,
        [m.miou for m in means],
        [m.texture_fp for m in means],
        reference=[v[4] for v in experiments.VARIANTS],
    )
    for n, m in zip(names, means):
        print(f"{n:12s} miou {m.miou:.4f} fp {m.fp:.4f} fn {m.fn:.4f} texture_fp {m.texture_fp:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    param = args.param
    if param not in experiments.SWEEP_PARAMS:
        raise ConfigError(f"--param must be one of {', '.join(experiments.SWEEP_PARAMS)}")
    if args.values:
        try:
            values = [float(v) for v in args.values.replace(",", " ").split()]
        except ValueError:
            raise ConfigError(f"--values must be numbers, got {args.values!r}") from None
    else:
        values = experiments.default_grid(param, cfg.model.depth)
    if param == "K":
        values = [int(v) for v in values]
    default = experiments.default_value(cfg.doei, cfg.model.depth, param)
    _makedirs(args.out)
    train_set, eval_set = _benchmark(cfg)
    rows = experiments.sweep(_experiment(cfg), param, values, train_set, eval_set, seeds=cfg.seeds)
    experiments.write_sweep_csv(os.path.join(args.out, f"sweep_{param}.csv"), rows, param, default)
    plots.sweep_lines(
        os.path.join(args.out, f"sweep_{param}.png"),
        param,
        [v for v, _ in rows],
        [m.miou for _, m in rows],
        [m.fp for _, m in rows],
        [m.fn for _, m in rows],
        default,
    )
    for v, m in rows:
        print(f"{param}={v} miou {m.miou:.4f} fp {m.fp:.4f} fn {m.fn:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="doei", description="Token-embedding optimisation for CAM-based weak supervision on synthetic scenes.")
    p.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")

    sp = sub.add_parser("gen-data", help="write a synthetic dataset with manifest")
    common(sp)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--start", type=int, default=0, help="first sample index (use a disjoint range for evaluation sets)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model; writes model.ckpt, loss.csv, loss.png")
    common(sp)
    sp.add_argument("--manifest", help="dataset manifest (default: generate train_count samples from the config)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("cam", help="export heatmaps, label maps and pseudo masks")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_cam)

    sp = sub.add_parser("eval", help="score predicted masks against a manifest")
    common(sp)
    sp.add_argument("--pred-dir", required=True, help="directory of NNNN.pgm masks (or a cam output directory)")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", help="metrics CSV path (default: <pred-dir>/metrics.csv)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train and score every mechanism combination")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("sweep", help="retrain the full method over one hyper-parameter")
    common(sp)
    sp.add_argument("--param", required=True, choices=experiments.SWEEP_PARAMS)
    sp.add_argument("--values", help="comma-separated values (default: the committed grid)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLoss as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, IoFailure, pnm.PnmError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # remaining validation failures (bad manifest labels, checkpoint mismatch) are input problems
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
