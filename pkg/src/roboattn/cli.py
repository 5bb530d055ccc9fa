"""``roboattn`` command-line entry point.

Exit codes: 0 success, 1 validation error or bad usage, 2 I/O error.
Paths inside manifests are relative to the manifest's own directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from roboattn import bench, corruptions, fusion, knowledge, mixup
from roboattn.config import Config
from roboattn.errors import InvalidInput, IoError, RoboAttnError
from roboattn.io import (
    MAP_SUFFIXES,
    load_image,
    load_map,
    load_raw_map,
    read_json,
    read_jsonl,
    read_manifest,
    save_image,
    save_map,
    write_json,
    write_jsonl,
)
from roboattn.maps import centered_gaussian, mean_map, normalize_sum

logger = logging.getLogger("roboattn")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def _rel(path: Path, start: Path) -> str:
    return Path(os.path.relpath(path, start)).as_posix()


def _distribution(path) -> np.ndarray:
    return normalize_sum(load_map(path))


def _emit(obj, out) -> None:
    if out:
        write_json(obj, out)
    else:
        print(json.dumps(obj, indent=2, sort_keys=True))


# -- fuse ---------------------------------------------------------------


def cmd_fuse(args, cfg: Config) -> int:
    labels = [_distribution(p) for p in args.maps]
    f = cfg["fusion"]
    settings = fusion.FusionSettings(
        logit_step=f["logit_step"],
        e_step=f["e_step"],
        max_iter=f["max_iter"],
        tol=f["tol"],
        direction=f["direction"],
    )
    fixed = args.e is not None
    e = args.e if fixed else args.init_e
    if e is not None and len(e) != len(labels):
        raise InvalidInput(f"{len(labels)} maps but {len(e)} log-variances")
    result = fusion.fit_fusion(
        fusion.FusionProblem(labels, e, freeze_e=fixed, settings=settings)
    )
    save_map(result.fused, args.out)
    _emit(result.to_dict(), args.report)
    return 0


# -- mine / embed -------------------------------------------------------


def _load_instances(masks_path: Path) -> dict:
    """image id -> list of (category, mask) from a JSON-lines mask manifest."""
    base = masks_path.parent
    by_image: dict = {}
    for row in read_jsonl(masks_path):
        if "rle" in row:
            mask = knowledge.decode_rle(row["rle"])
        elif "mask" in row:
            mask = (load_raw_map(_resolve(base, row["mask"])) > 0).astype(np.uint8)
        else:
            raise InvalidInput(f"{masks_path}: mask row needs 'rle' or 'mask'")
        by_image.setdefault(str(row["image"]), []).append((row["category"], mask))
    return by_image


def _row_labels(row: dict, base: Path) -> dict:
    maps = row.get("maps") or {}
    if not maps:
        raise InvalidInput(f"manifest row {row.get('id')!r} has no maps")
    return {src: _distribution(_resolve(base, p)) for src, p in sorted(maps.items())}


def cmd_mine(args, cfg: Config) -> int:
    manifest = Path(args.manifest)
    rows = read_manifest(manifest)
    instances = _load_instances(Path(args.masks))
    k = cfg["knowledge"]

    def dataset():
        for row in rows:
            inst = instances.get(str(row["id"]), [])
            if inst:
                labels = _row_labels(row, manifest.parent)
                yield inst, mean_map(list(labels.values()))

    stats = knowledge.category_stats(dataset())
    selection = knowledge.mine(stats, k["p"], k["eta"])
    out = selection.to_dict()
    out["skipped_instances"] = stats.skipped
    _emit(out, args.out)
    return 0


def cmd_embed(args, cfg: Config) -> int:
    manifest = Path(args.manifest)
    out_dir = Path(args.out_dir)
    rows = read_manifest(manifest)
    instances = _load_instances(Path(args.masks))
    priors = knowledge.PriorSelection.from_dict(read_json(args.priors)).priors
    alpha = cfg["knowledge"]["alpha"]
    out_rows = []
    for row in rows:
        labels = _row_labels(row, manifest.parent)
        shape = next(iter(labels.values())).shape
        prior_mask = knowledge.build_prior_mask(
            instances.get(str(row["id"]), []), priors, shape
        )
        new_maps = {}
        for src, y in labels.items():
            if args.concat:
                path = out_dir / "maps" / str(row["id"]) / f"{src}.npy"
                save_map(knowledge.embed_concat(y, prior_mask), path)
            else:
                path = out_dir / "maps" / str(row["id"]) / f"{src}.attn"
                save_map(knowledge.embed(y, prior_mask, alpha), path)
            new_maps[src] = _rel(path, out_dir)
        new_row = {
            key: (_rel(_resolve(manifest.parent, val), out_dir) if key in ("image", "prediction") else val)
            for key, val in row.items()
        }
        new_row["maps"] = new_maps
        new_row["embed"] = {"alpha": alpha, "concat": bool(args.concat), "priors": list(priors)}
        out_rows.append(new_row)
    write_jsonl(out_rows, out_dir / "manifest.jsonl")
    return 0


# -- augment ------------------------------------------------------------


def _load_sample(row: dict, base: Path) -> mixup.Sample:
    labels = _row_labels(row, base)
    image = load_image(_resolve(base, row["image"]))
    pred = None
    if row.get("prediction"):
        pred = _distribution(_resolve(base, row["prediction"]))
    return mixup.Sample(image, np.stack(list(labels.values())), pred, str(row["id"]))


def _write_sample(s: mixup.Sample, sources, out_dir: Path, key: str, extra: dict) -> dict:
    image_path = out_dir / "images" / f"{key}.png"
    save_image(s.image, image_path)
    maps = {}
    for src, y in zip(sources, s.labels):
        p = out_dir / "maps" / key / f"{src}.attn"
        save_map(y, p)
        maps[src] = _rel(p, out_dir)
    row = {"id": key, "image": _rel(image_path, out_dir), "maps": maps, **extra}
    if s.prediction is not None:
        p = out_dir / "pred" / f"{key}.attn"
        save_map(s.prediction, p)
        row["prediction"] = _rel(p, out_dir)
    return row


def cmd_augment(args, cfg: Config) -> int:
    manifest = Path(args.manifest)
    out_dir = Path(args.out_dir)
    m = cfg["mixup"]
    policy = mixup.MixPolicy(
        mode=m["mode"],
        alpha_beta=m["alpha_beta"],
        top_k=m["top_k"],
        crop_scale=(m["crop_min"], m["crop_max"]),
        eta_reg=m["eta_reg"],
        eps=cfg["eps"],
    ).validate()
    rows = read_manifest(manifest)
    out_rows = []
    for row in rows:
        copied = dict(row)
        for key in ("image", "prediction"):
            if row.get(key):
                copied[key] = _rel(_resolve(manifest.parent, row[key]), out_dir)
        copied["maps"] = {
            s: _rel(_resolve(manifest.parent, p), out_dir) for s, p in row.get("maps", {}).items()
        }
        out_rows.append(copied)

    streams = np.random.SeedSequence(cfg["seed"]).spawn(
        (len(rows) + m["batch_size"] - 1) // m["batch_size"]
    )
    for b, start in enumerate(range(0, len(rows), m["batch_size"])):
        rng = np.random.default_rng(streams[b])
        chunk = rows[start : start + m["batch_size"]]
        samples = [_load_sample(r, manifest.parent) for r in chunk]
        sources = sorted(chunk[0].get("maps", {}))
        if policy.mode == "soft" or all(s.prediction is not None for s in samples):
            augmented = mixup.corruption_robust_batch(samples, policy, rng)[len(samples):]
        else:
            # vanilla mixup without predictions: random candidates
            k = mixup.candidate_count(policy.top_k, len(samples))
            augmented = []
            for i in rng.choice(len(samples), size=k, replace=False):
                j = i if len(samples) == 1 else (int(rng.integers(len(samples) - 1)) + 1 + i) % len(samples)
                lam = mixup.sample_lambda(policy.alpha_beta, rng)
                augmented.append(mixup.vanilla_mixup(samples[i], samples[j], lam))
        for n, s in enumerate(augmented):
            out_rows.append(
                _write_sample(s, sources, out_dir, f"b{b}_mix{n}", {"parents": s.id, "aug": policy.mode})
            )
        if args.crops:
            for n, s in enumerate(samples):
                c = mixup.random_crop(s, policy.crop_scale, rng)
                out_rows.append(
                    _write_sample(c, sources, out_dir, f"b{b}_crop{n}", {"parents": c.id, "aug": "crop"})
                )
    write_jsonl(out_rows, out_dir / "manifest.jsonl")
    return 0


# -- corrupt ------------------------------------------------------------


def cmd_corrupt(args, cfg: Config) -> int:
    manifest = Path(args.input_manifest)
    out_dir = Path(args.out_dir)
    c = cfg["corruption"]
    rows = corruptions.corrupt_dataset(
        read_manifest(manifest),
        out_dir,
        kinds=c["kinds"],
        severities=c["severities"],
        global_seed=cfg["seed"],
        workers=cfg["workers"],
        base_dir=manifest.parent,
    )
    write_jsonl(rows, out_dir / "manifest.jsonl")
    failed = sum(r["status"] != "ok" for r in rows)
    if failed:
        logger.warning("%d corruption rows failed", failed)
    return 0


# -- eval / bench / bias-split -----------------------------------------


def _map_files(directory) -> dict:
    d = Path(directory)
    if not d.is_dir():
        raise IoError(f"{d}: not a directory")
    return {
        p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in MAP_SUFFIXES
    }


def cmd_eval(args, cfg: Config) -> int:
    preds = _map_files(args.pred)
    gts = _map_files(args.gt)
    missing = sorted(set(gts) - set(preds))
    if missing or not gts:
        raise InvalidInput(f"no prediction for ground-truth maps: {missing[:5]}" if missing else "no ground-truth maps")
    per_image = {}
    for stem in sorted(gts):
        kld, cc = bench.evaluate_pairs([_distribution(preds[stem])], [_distribution(gts[stem])])
        per_image[stem] = {"kld": kld, "cc": cc}
    out = {
        "n": len(per_image),
        "kld": float(np.mean([v["kld"] for v in per_image.values()])),
        "cc": float(np.mean([v["cc"] for v in per_image.values()])),
        "kld_direction": "KL(gt || pred)",
        "per_image": per_image,
    }
    _emit(out, args.out)
    return 0


def cmd_bench(args, cfg: Config) -> int:
    tables = [bench.load_table(p) for p in args.table] if args.table else [bench.bundled_bdda_c()]
    if args.reference:
        for t in tables:
            t.reference = args.reference
    if args.out_dir:
        doc = bench.render_report(tables, args.out_dir)
    else:
        doc = {"tables": [{**t.to_dict(), "summary": bench.summarize(t)} for t in tables]}
    for t in tables:
        print(bench._text_summary(t, bench.summarize(t)), end="")
    if args.json:
        print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def cmd_bias_split(args, cfg: Config) -> int:
    files = _map_files(args.maps)
    if not files:
        raise InvalidInput(f"{args.maps}: no map files")
    names = list(files)
    maps = [_distribution(files[n]) for n in names]
    if args.avg:
        s_avg = _distribution(args.avg)
    elif args.gaussian_sigma:
        s_avg = centered_gaussian(*maps[0].shape, sigma=args.gaussian_sigma)
    else:
        s_avg = mean_map(maps)
    deltas = args.deltas or cfg["bench"]["deltas"]
    splits = bench.central_bias_splits(maps, s_avg, deltas)
    summary = {}
    for d, idx in splits.items():
        chosen = set(idx)
        doc = {
            "delta": d,
            "selected": [names[i] for i in idx],
            "complement": [n for i, n in enumerate(names) if i not in chosen],
        }
        if args.out_dir:
            write_json(doc, Path(args.out_dir) / f"split_{d:g}.json")
        summary[f"{d:g}"] = len(idx)
    print(json.dumps({"n": len(names), "selected": summary}, sort_keys=True))
    return 0


# -- parser -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file (default: $ROBOATTN_CONFIG)")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--workers", type=int, help="worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="roboattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fuse", parents=[common], help="fuse pseudo-labels")
    p.add_argument("maps", nargs="+")
    p.add_argument("--e", type=float, nargs="+", help="fixed log-variances (frozen)")
    p.add_argument("--init-e", type=float, nargs="+", help="initial log-variances")
    p.add_argument("--out", required=True, help="fused map file")
    p.add_argument("--report", help="JSON report path (default stdout)")
    p.add_argument("--max-iter", type=int)
    p.add_argument("--logit-step", type=float)
    p.add_argument("--e-step", type=float)
    p.add_argument("--tol", type=float)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("mine", parents=[common], help="mine prior categories")
    p.add_argument("--manifest", required=True)
    p.add_argument("--masks", required=True, help="JSON-lines instance masks")
    p.add_argument("--p", type=float, help="coverage threshold in percent")
    p.add_argument("--eta", type=float, help="proportion factor")
    p.add_argument("--out", help="PriorSelection JSON (default stdout)")
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("embed", parents=[common], help="embed prior masks into labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--priors", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--concat", action="store_true", help="write (2, H, W) stacks")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("augment", parents=[common], help="RoboMixup augmentation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mode", choices=["vanilla", "soft"])
    p.add_argument("--topk", type=float)
    p.add_argument("--beta-alpha", type=float)
    p.add_argument("--crop-min", type=float)
    p.add_argument("--crop-max", type=float)
    p.add_argument("--crops", action="store_true", help="append one random crop per sample")
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("corrupt", parents=[common], help="generate corrupted images")
    p.add_argument("--input-manifest", required=True)
    p.add_argument("--kinds", nargs="+", choices=corruptions.KINDS)
    p.add_argument("--severities", type=int, nargs="+")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("eval", parents=[common], help="score predictions")
    p.add_argument("--pred", required=True, help="directory of predicted maps")
    p.add_argument("--gt", required=True, help="directory of ground-truth maps")
    p.add_argument("--out", help="metrics JSON (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="mCD / Relative mCD report")
    p.add_argument("--table", nargs="+", help="table JSON files (default: bundled fixture)")
    p.add_argument("--reference")
    p.add_argument("--out-dir")
    p.add_argument("--json", action="store_true", help="also print the JSON report")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("bias-split", parents=[common], help="central-bias threshold splits")
    p.add_argument("--maps", required=True, help="directory of maps")
    p.add_argument("--deltas", type=float, nargs="+")
    p.add_argument("--avg", help="average map file (default: mean of --maps)")
    p.add_argument("--gaussian-sigma", type=float, help="use a centred Gaussian average")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_bias_split)
    return parser


def _overrides(args) -> dict:
    o: dict = {}

    def put(section, key, value):
        if value is not None:
            (o.setdefault(section, {}) if section else o)[key] = value

    put(None, "seed", args.seed)
    put(None, "workers", args.workers)
    get = lambda name: getattr(args, name, None)  # noqa: E731
    for key, name in (("max_iter", "max_iter"), ("logit_step", "logit_step"),
                      ("e_step", "e_step"), ("tol", "tol")):
        put("fusion", key, get(name))
    if args.command in ("mine", "embed"):
        put("knowledge", "p", get("p"))
        put("knowledge", "eta", get("eta"))
        put("knowledge", "alpha", get("alpha"))
    for key, name in (("mode", "mode"), ("top_k", "topk"), ("alpha_beta", "beta_alpha"),
                      ("crop_min", "crop_min"), ("crop_max", "crop_max"),
                      ("batch_size", "batch_size")):
        put("mixup", key, get(name))
    if args.command == "corrupt":
        put("corruption", "kinds", get("kinds"))
        put("corruption", "severities", get("severities"))
    return o


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = Config.load(args.config, _overrides(args))
        return args.func(args, cfg)
    except IoError as exc:
        print(f"roboattn: I/O error: {exc}", file=sys.stderr)
        return 2
    except RoboAttnError as exc:
        print(f"roboattn: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"roboattn: I/O error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
