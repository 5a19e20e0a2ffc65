"""Command-line entry point: ``odgen <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .data import (
    LoadError,
    corpus_stats,
    generate_synthetic_corpus,
    list_area_dirs,
    load_area,
    load_area_spatial,
    load_corpus,
    read_labels,
    read_od_csv,
    save_corpus,
    split_corpus,
    write_od_csv,
)
from .diffusion import ConfigError, SamplerConfig, TrainingError
from .graph import InvalidInputError
from .gravity import GravityFitError, GravityParams, gravity_fit, load_params, predict_area, save_params
from .metrics import DEFAULT_SIZE_BANDS, METRIC_NAMES, GroupingSpec, aggregate, evaluate_area, record_as_row
from .training import DiffusionTrainConfig, WeDAN, train_wedan

EXIT_VALIDATION = 2
VALIDATION_ERRORS = (LoadError, InvalidInputError, GravityFitError, ConfigError, ValueError)

log = logging.getLogger("odgen")


def _train_ids(args):
    if getattr(args, "split", None):
        return json.loads(Path(args.split).read_text(encoding="utf-8"))["train"]
    return None


def cmd_split(args):
    ids = [d.name[len("area_"):] for d in list_area_dirs(args.corpus)]
    ratios = tuple(float(r) for r in args.ratios.split(","))
    split = split_corpus(ids, ratios, args.seed)
    Path(args.out).write_text(json.dumps(split.to_dict(), indent=2) + "\n", encoding="utf-8")
    print(f"train={len(split.train)} val={len(split.val)} test={len(split.test)}")


def cmd_synth(args):
    params = GravityParams(args.K, args.alpha, args.beta, args.gamma, args.decay)
    lo, hi = (int(v) for v in args.n_range.split(","))
    data = generate_synthetic_corpus(args.n_areas, (lo, hi), args.seed, params=params, noise_level=args.noise)
    save_corpus(args.out, data)
    print(f"wrote {len(data)} areas to {args.out}")


def cmd_fit_gravity(args):
    data = load_corpus(args.corpus, _train_ids(args))
    result = gravity_fit(data, args.decay, args.mass_col, per_area=args.per_area)
    if args.per_area:
        out = {k: v.__dict__ for k, v in result.items()}
        Path(args.out).write_text(json.dumps(out, indent=2) + "\n", encoding="utf-8")
    else:
        save_params(result, args.out, {"mass_column": args.mass_col, "n_areas": len(data)})
        print(result.to_json())


def cmd_predict_gravity(args):
    params = load_params(args.params)
    area = load_area_spatial(args.area)
    od = predict_area(params, area, args.mass_col)
    write_od_csv(args.out, area.region_ids, od.flows)


def cmd_train(args):
    cfg_dict = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    config = DiffusionTrainConfig.from_dict(cfg_dict)
    train_ids = _train_ids(args)
    split = None
    if train_ids is None and "split" in cfg_dict:
        ids = [d.name[len("area_"):] for d in list_area_dirs(args.corpus)]
        s = cfg_dict["split"]
        split = split_corpus(ids, tuple(s.get("ratios", (0.8, 0.1, 0.1))), int(s.get("seed", 0)))
        train_ids = split.train
    data = load_corpus(args.corpus, train_ids)
    if not data:
        raise InvalidInputError("no training areas found")
    model = train_wedan(data, config)
    extra = {"split": split.to_dict()} if split else {}
    model.save(args.out, extra)
    print(f"trained on {len(data)} areas; final loss {np.mean(model.history[-50:]):.4f}; saved to {args.out}")


def _sampler(args) -> SamplerConfig:
    return SamplerConfig(
        tau=args.tau, n_samples=args.samples, round_counts=args.round, update=args.update, average=args.average
    )


def cmd_generate(args):
    model = WeDAN.load(args.ckpt)
    sampler = _sampler(args)
    root = Path(args.area)
    if (root / "meta.json").exists():
        area = load_area_spatial(root)
        od = model.generate(area, sampler, args.seed)
        write_od_csv(args.out, area.region_ids, od.flows)
        return
    out = Path(args.out)
    for d in list_area_dirs(root):
        area = load_area_spatial(d)
        target = out / d.name
        target.mkdir(parents=True, exist_ok=True)
        write_od_csv(target / "od.csv", area.region_ids, model.generate(area, sampler, args.seed).flows)
    print(f"generated {len(list_area_dirs(root))} areas into {out}")


def _generated_path(gen_dir: Path, area_id: str):
    for cand in (gen_dir / f"area_{area_id}" / "od.csv", gen_dir / f"area_{area_id}.csv", gen_dir / f"{area_id}.csv"):
        if cand.exists():
            return cand
    return None


def cmd_evaluate(args):
    gen_dir = Path(args.generated)
    labels = read_labels(args.labels) if args.labels else {}
    bands = tuple(int(b) for b in args.group_size_bands.split(",")) if args.group_size_bands else DEFAULT_SIZE_BANDS
    grouping = GroupingSpec(bands, labels)
    records, missing = [], []
    for d in list_area_dirs(args.real):
        area, od = load_area(d)
        path = _generated_path(gen_dir, area.area_id)
        if path is None:
            missing.append(area.area_id)
            continue
        F_hat = read_od_csv(path, area.region_ids)
        records.append(evaluate_area(od.flows, F_hat, area.area_id, args.jsd_mode, labels.get(area.area_id)))
    if missing:
        raise InvalidInputError(f"no generated OD for area(s): {', '.join(missing[:10])}")
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("area_id",) + METRIC_NAMES, lineterminator="\n")
        writer.writeheader()
        for r in records:
            writer.writerow({k: ("" if isinstance(v, float) and math.isnan(v) else v) for k, v in record_as_row(r).items()})
    rows = aggregate(records, grouping)
    summary_path = Path(args.out).with_name(Path(args.out).stem + "_summary.csv")
    with open(summary_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["group", "n_areas"] + list(METRIC_NAMES) + [f"undefined_{m}" for m in METRIC_NAMES])
        for row in rows:
            writer.writerow([row.group, row.n_areas] + [row.means[m] for m in METRIC_NAMES] + [row.n_undefined[m] for m in METRIC_NAMES])
    width = max(len(r.group) for r in rows)
    print(f"{'group':<{width}}  {'n':>4}  " + "  ".join(f"{m:>11}" for m in METRIC_NAMES))
    for row in rows:
        print(f"{row.group:<{width}}  {row.n_areas:>4}  " + "  ".join(f"{row.means[m]:>11.4f}" for m in METRIC_NAMES))


def cmd_stats(args):
    stats = corpus_stats(load_corpus(args.corpus))
    Path(args.out).write_text(json.dumps(stats.to_dict(), indent=2) + "\n", encoding="utf-8")
    print(f"{len(stats.per_area)} areas; region counts {stats.region_count_hist}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="odgen", description="Commuting OD matrix generation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("split", help="seeded train/val/test split of a corpus")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ratios", default="0.8,0.1,0.1")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("synth", help="write a gravity-generated synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n-areas", type=int, default=20)
    s.add_argument("--n-range", default="5,15")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--decay", choices=["power", "exp"], default="power")
    s.add_argument("--K", type=float, default=1e-3)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--beta", type=float, default=1.0)
    s.add_argument("--gamma", type=float, default=2.0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit-gravity", help="calibrate GM-P / GM-E")
    s.add_argument("--decay", choices=["power", "exp"], required=True)
    s.add_argument("--mass-col", type=int, default=0)
    s.add_argument("--corpus", required=True)
    s.add_argument("--split", help="split.json; fit on its train ids only")
    s.add_argument("--per-area", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_gravity)

    s = sub.add_parser("predict-gravity", help="gravity OD for one area")
    s.add_argument("--params", required=True)
    s.add_argument("--area", required=True)
    s.add_argument("--mass-col", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict_gravity)

    s = sub.add_parser("train", help="train the diffusion generator")
    s.add_argument("--corpus", required=True)
    s.add_argument("--config")
    s.add_argument("--split", help="split.json; train on its train ids only")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", help="generate OD for an area (or every area in a corpus dir)")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--area", required=True)
    s.add_argument("--tau", type=int, default=50)
    s.add_argument("--samples", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--update", choices=["ddim", "paper"], default="ddim")
    s.add_argument("--average", choices=["log", "linear"], default="log")
    s.add_argument("--round", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("evaluate", help="metrics of generated vs real OD matrices")
    s.add_argument("--real", required=True)
    s.add_argument("--generated", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--group-size-bands", help="comma-separated cut points, e.g. 20,50,100,200,500")
    s.add_argument("--labels", help="labels.csv with area_id,label")
    s.add_argument("--jsd-mode", choices=["paper", "mixture"], default="paper")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("stats", help="corpus statistics as JSON")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except TrainingError as exc:
        print(f"odgen: training failed: {exc}", file=sys.stderr)
        return 1
    except VALIDATION_ERRORS as exc:
        print(f"odgen: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return 0


if __name__ == "__main__":
    sys.exit(main())
