"""Command-line entry point: ``nprkit <subcommand> ...``.

Every subcommand that writes files also writes ``<output>.manifest.json``
recording the subcommand, the resolved flags, SHA-256 hashes of the inputs,
the seed, the toolkit version and start/end times. Outputs themselves carry
no timestamps, so re-running with the same flags gives identical bytes.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

import argparse
import csv
import hashlib
import json
import sys
from datetime import date, datetime, time, timezone
from pathlib import Path

import tomli

from nprkit import (
    MANIFEST_VERSION,
    NPRE_VERSION,
    __version__,
    _parallel,
    embed,
    geo,
    photometry,
    retrieval,
    router,
    solar,
    synthetic,
)
from nprkit.corpus import (
    Corpus,
    Role,
    load_corpus,
    load_image,
    parse_instant,
    save_corpus,
    save_image,
    split_by_condition,
    with_condition,
)
from nprkit.errors import DataError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _float_list(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _int_list(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


# --- hashing and manifests ---

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def sha256_path(path):
    """File digest, or for a directory a digest over sorted (relative name, file digest)."""
    path = Path(path)
    if path.is_file():
        return sha256_file(path)
    h = hashlib.sha256()
    for p in sorted(q for q in path.rglob("*") if q.is_file()):
        h.update(f"{p.relative_to(path).as_posix()}\0{sha256_file(p)}\n".encode())
    return h.hexdigest()


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds").replace("+00:00", "Z")


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def write_manifest(output, command, flags, inputs, seed, started):
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "subcommand": command,
        "flags": {k: _jsonable(v) for k, v in sorted(flags.items())},
        "inputs": {str(p): sha256_path(p) for p in sorted(set(map(str, inputs)))},
        "seed": seed,
        "version": __version__,
        "started_utc": started,
        "finished_utc": _now(),
    }
    path = Path(f"{output}.manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# --- shared loaders ---

def _corpus(args):
    root = args.image_root if args.image_root is not None else Path(args.corpus).parent
    return load_corpus(args.corpus, root)


def _list_images(folder):
    folder = Path(folder)
    if not folder.is_dir():
        raise DataError(f"{folder}: not a directory")
    return sorted(p for p in folder.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)


def _read_id_map(path):
    """Two-column CSV (or JSON object) mapping day id -> night id."""
    path = Path(path)
    if path.suffix == ".json":
        with open(path, encoding="utf-8") as fh:
            return dict(json.load(fh))
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if rows and rows[0][:2] == ["day_id", "night_id"]:
        rows = rows[1:]
    return {r[0]: r[1] for r in rows if r}


def _night_params(args):
    base = photometry.NightParams()
    if args.params is not None:
        if Path(args.params).suffix == ".toml":
            with open(args.params, "rb") as fh:
                base = photometry.NightParams.from_json(base.to_json() | tomli.load(fh))
        else:
            with open(args.params, encoding="utf-8") as fh:
                base = photometry.NightParams.from_json(json.load(fh))
    fields = base.to_json()
    for flag, key in (("exposure_gain", "exposure_gain"), ("gamma", "gamma"),
                      ("vignette", "vignette_strength"), ("noise", "noise_sigma"),
                      ("lights", "light_count")):
        v = getattr(args, flag)
        if v is not None:
            fields[key] = v
    if args.wb_shift is not None:
        fields["wb_shift"] = list(args.wb_shift)
    fields["seed"] = args.seed
    return photometry.NightParams.from_json(fields)


def _solar_cfg(args):
    return solar.SolarConfig(args.sunset_zenith, args.sunset_offset)


# --- subcommands ---

def cmd_ingest(args):
    corpus = _corpus(args)
    if args.relabel == "solar":
        lab = solar.solar_labeler(_solar_cfg(args))
        recs = [with_condition(r, lab(r)) if r.timestamp_utc is not None else r for r in corpus.records]
        corpus = Corpus(tuple(recs), corpus.name)
    save_corpus(corpus, args.out)
    groups = split_by_condition(corpus)
    summary = ", ".join(f"{c.value}={len(g)}" for c, g in groups.items())
    print(f"{len(corpus)} records ({len(corpus.database())} database, {len(corpus.queries())} query): {summary}")
    return [args.out], [args.corpus]


def cmd_night_sim(args):
    params = _night_params(args)
    src, dst = Path(args.input), Path(args.output)
    files = _list_images(src)
    if not files:
        raise DataError(f"{src}: no images found")
    dst.mkdir(parents=True, exist_ok=True)

    def one(p):
        out = dst / p.relative_to(src).with_suffix(".png")
        out.parent.mkdir(parents=True, exist_ok=True)
        save_image(out, photometry.night_transform(load_image(p), params))
        return out

    outs = _parallel.ordered_map(one, files)
    params_path = dst / "night_params.json"
    with open(params_path, "w", encoding="utf-8") as fh:
        json.dump(params.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"rendered {len(outs)} images into {dst}")
    return [dst / "night-sim", params_path], [src]


def cmd_luminance(args):
    src = Path(args.input)
    files = _list_images(src) if src.is_dir() else [src]
    lums = _parallel.ordered_map(lambda p: photometry.mean_luminance(load_image(p)), files)
    rows = [(p.relative_to(src).as_posix() if src.is_dir() else p.name, lum,
             photometry.classify_by_brightness(lum, args.threshold).value) for p, lum in zip(files, lums)]
    if args.out is None:
        for name, lum, label in rows:
            print(f"{name}\t{lum:.6f}\t{label}")
        return [], [src]
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "mean_luminance", "label"])
        for name, lum, label in rows:
            w.writerow([name, repr(float(lum)), label])
    return [args.out], [src]


def _fmt_time(dt):
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def cmd_solar(args):
    cfg = _solar_cfg(args)
    try:
        day = date.fromisoformat(args.date)
    except ValueError:
        raise UsageError(f"--date {args.date!r} is not YYYY-MM-DD") from None
    rise = solar.sunrise_utc(args.lat, args.lon, day, cfg)
    sset = solar.sunset_utc(args.lat, args.lon, day, cfg)
    print(f"location  lat={args.lat:.6f} lon={args.lon:.6f} date={day.isoformat()}")
    noon = datetime.combine(day, time(12), timezone.utc)
    polar = "up" if solar.solar_elevation_deg(args.lat, args.lon, noon) > cfg.threshold_elevation_deg else "down"
    for name, dt in (("sunrise", rise), ("sunset", sset)):
        if dt is None:
            print(f"{name:<9} none (sun stays {polar})")
        else:
            local = solar.local_solar_time(dt, args.lon)
            print(f"{name:<9} {_fmt_time(dt)}  local solar {local.strftime('%H:%M:%S')}")
    if args.time is not None:
        at = parse_instant(f"{day.isoformat()}T{args.time}")
        elev = solar.solar_elevation_deg(args.lat, args.lon, at)
        night = solar.is_night_at(args.lat, args.lon, at, cfg)
        print(f"at        {_fmt_time(at)}  elevation {elev:.3f} deg  {'Night' if night else 'Day'}")
    return [], []


def cmd_partition(args):
    corpus = _corpus(args)
    classes = geo.partition_classes(corpus, args.cell_size, args.heading_bins)
    geo.write_jsonl(args.out, classes)
    print(f"{len(classes)} classes over {sum(len(c.member_ids) for c in classes)} database images")
    return [args.out], [args.corpus]


def cmd_mine(args):
    corpus = _corpus(args)
    res = geo.mine_triplets(corpus, args.r_pos, args.r_neg, args.per_anchor, args.seed)
    geo.write_jsonl(args.out, res.triplets)
    outs = [args.out]
    if args.skipped_out is not None:
        Path(args.skipped_out).write_text("".join(f"{i}\n" for i in res.skipped), encoding="utf-8")
        outs.append(args.skipped_out)
    print(f"{len(res.triplets)} triplets, {len(res.skipped)} anchors skipped")
    return outs, [args.corpus]


def cmd_embed(args):
    corpus = _corpus(args)
    recs = corpus.records
    if args.role != "all":
        recs = corpus.database() if args.role == "database" else corpus.queries()
    images = {r.id: (lambda r=r: load_image(r.image_path)) for r in recs}
    if not images:
        raise DataError("no records selected")
    desc = embed.describe_images(images)
    inputs = [args.corpus]
    if args.head is not None:
        desc = embed.ProjectionHead.load(args.head).embed_map(desc)
        inputs.append(args.head)
    embed.write_embeddings(args.out, desc)
    print(f"wrote {len(desc)} embeddings of dim {len(next(iter(desc.values())))}")
    return [args.out], inputs + [r.image_path for r in recs]


def cmd_train(args):
    desc = embed.read_embeddings(args.descriptors)
    inputs = [args.descriptors]
    mode = embed.AnchorMode(args.anchor_mode)
    night_map = {}
    if args.night_descriptors is not None:
        night = embed.read_embeddings(args.night_descriptors)
        inputs.append(args.night_descriptors)
        if args.night_map is not None:
            night_map = _read_id_map(args.night_map)
            inputs.append(args.night_map)
        else:
            night_map = {i: i for i in night}
        for day_id, night_id in sorted(night_map.items()):
            if night_id not in night:
                raise DataError(f"night descriptor {night_id!r} for {day_id!r} not found")
            desc[f"{day_id}~night"] = night[night_id]
        night_map = {d: f"{d}~night" for d in night_map}
    if args.loss == "triplet":
        if args.triplets is None:
            raise UsageError("--triplets is required with --loss triplet")
        sup = geo.read_triplets(args.triplets)
        inputs.append(args.triplets)
        if night_map:
            sup = embed.night_triplets(sup, night_map, mode)
        objective = embed.TripletObjective(args.margin)
    else:
        if args.classes is None:
            raise UsageError("--classes is required with --loss lmcl")
        sup = geo.read_classes(args.classes)
        inputs.append(args.classes)
        if night_map:
            sup = embed.night_classes(sup, night_map, mode)
        objective = embed.LmclObjective(args.s, args.m)
    init = None
    if args.init is not None:
        init = embed.ProjectionHead.load(args.init)
        inputs.append(args.init)
    lr = args.lr if args.lr is not None else (embed.FINE_TUNE_LR if init is not None else embed.FRESH_TRAIN_LR)
    cfg = embed.TrainConfig(objective, lr, args.epochs, args.batch_size, args.seed,
                            embed.NegativeStrategy(args.negatives), args.out_dim, args.clip_norm)
    res = embed.train_projection(desc, sup, cfg, init)
    res.head.save(args.out)
    outs = [args.out]
    if args.history is not None:
        with open(args.history, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss"])
            for k, v in enumerate(res.history, start=1):
                w.writerow([k, repr(float(v))])
        outs.append(args.history)
    print(f"trained {res.head.out_dim}x{res.head.in_dim} head, loss {res.history[0]:.6g} -> {res.history[-1]:.6g}")
    return outs, inputs


def cmd_index(args):
    emb = embed.read_embeddings(args.embeddings)
    inputs = [args.embeddings]
    if args.corpus is not None:
        corpus = _corpus(args)
        keep = {r.id for r in corpus.database()}
        missing = sorted(keep - set(emb))
        if missing:
            raise DataError(f"{len(missing)} database records lack embeddings, e.g. {missing[:3]}")
        emb = {i: v for i, v in emb.items() if i in keep}
        inputs.append(args.corpus)
    index = retrieval.build_index(emb)
    embed.write_embeddings(args.out, dict(zip(index.ids, index.matrix)))
    print(f"index of {len(index)} x {index.dim}")
    return [args.out], inputs


def _query_embeddings(args, index_ids):
    emb = embed.read_embeddings(args.queries)
    if args.corpus is not None:
        corpus = _corpus(args)
        keep = {r.id for r in corpus.queries()}
        emb = {i: v for i, v in emb.items() if i in keep}
    else:
        emb = {i: v for i, v in emb.items() if i not in index_ids}
    return emb


def cmd_search(args):
    index = retrieval.build_index(embed.read_embeddings(args.index))
    queries = _query_embeddings(args, set(index.ids))
    if not queries:
        raise DataError("no query embeddings")
    results = retrieval.search(index, queries, args.k)
    retrieval.write_results(args.out, results)
    truncated = sum(r.truncated for r in results)
    print(f"{len(results)} queries searched (k={args.k}{f', {truncated} truncated' if truncated else ''})")
    inputs = [args.index, args.queries] + ([args.corpus] if args.corpus else [])
    return [args.out], inputs


def _write_report(args, report, title):
    retrieval.write_report_csv(args.out, report)
    outs = [args.out]
    if args.svg is not None:
        series = {b: s.recall for b, s in report.buckets.items() if s.count and "/" not in b}
        Path(args.svg).write_text(retrieval.recall_curve_svg(series, title), encoding="utf-8")
        outs.append(args.svg)
    for b, s in report.buckets.items():
        if s.count:
            print(f"{b:<14} n={s.count:<6} " + " ".join(f"R@{n}={s.recall[n]:.4f}" for n in report.n_values))
    return outs


def cmd_eval(args):
    corpus = _corpus(args)
    results = retrieval.read_results(args.results)
    if args.sunset_split:
        report = retrieval.sunset_split_eval(results, corpus, _solar_cfg(args), args.n, args.threshold)
    else:
        report = retrieval.recall_at_n(results, corpus, args.n, args.threshold)
    return _write_report(args, report, "Recall@N"), [args.corpus, args.results]


def _route_mode(args):
    cfg = _solar_cfg(args)
    if args.mode == "brightness":
        return router.BrightnessMode(args.threshold_lum)
    if args.mode == "solar":
        return router.SolarTimeMode(cfg)
    return router.HybridMode(cfg, args.threshold_lum)


def cmd_route_eval(args):
    corpus = _corpus(args)
    pipelines = {}
    for name, idx_path, q_path in (("day", args.day_index, args.day_queries),
                                   ("night", args.night_index, args.night_queries)):
        index = retrieval.build_index(embed.read_embeddings(idx_path))
        pipelines[name] = router.Pipeline.from_embeddings(index, embed.read_embeddings(q_path))
    rt = router.Router(pipelines, router.RouteConfig(_route_mode(args)))
    queries = corpus.queries()
    batch = rt.route_and_search(queries, args.k, image_loader=lambda r: load_image(r.image_path))
    for qid, err in sorted(batch.errors.items()):
        print(f"warning: {err}", file=sys.stderr)
    if not batch.results:
        raise DataError("no query could be routed")
    routed_ids = {r.query_id for r in batch.results}
    sub = Corpus(tuple(r for r in corpus.records if r.role is Role.DATABASE or r.id in routed_ids), corpus.name)
    if args.sunset_split:
        report = retrieval.sunset_split_eval(batch.results, sub, _solar_cfg(args), args.n, args.threshold)
    else:
        report = retrieval.recall_at_n(batch.results, sub, args.n, args.threshold)
    outs = _write_report(args, report, "Recall@N (divide and conquer)")
    if args.tags_out is not None:
        router.write_route_tags(args.tags_out, batch.tags)
        outs.append(args.tags_out)
    if args.results_out is not None:
        retrieval.write_results(args.results_out, batch.results)
        outs.append(args.results_out)
    counts = {}
    for t in batch.tags.values():
        counts[t.route] = counts.get(t.route, 0) + 1
    print("routed " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items()))
          + (f", {len(batch.errors)} failed" if batch.errors else ""))
    inputs = [args.corpus, args.day_index, args.day_queries, args.night_index, args.night_queries]
    inputs += [r.image_path for r in queries if r.timestamp_utc is None]
    return outs, inputs


def cmd_report(args):
    series = {}
    for spec in args.reports:
        label, _, path = spec.rpartition("=")
        label = label or Path(path).stem
        table, _ = retrieval.read_report_csv(path)
        if args.bucket not in table:
            raise DataError(f"{path}: no bucket {args.bucket!r}")
        series[label] = table[args.bucket]
    Path(args.out).write_text(retrieval.recall_curve_svg(series, args.title or f"Recall@N ({args.bucket})"),
                              encoding="utf-8")
    return [args.out], [s.rpartition("=")[2] for s in args.reports]


def cmd_synth(args):
    if args.kind == "eval":
        ds = synthetic.evaluation_set(args.places, seed=args.seed, sunset_queries=args.sunset_queries,
                                      drop_timestamps=args.drop_timestamps)
    else:
        ds = synthetic.training_set(args.places, views=args.views, seed=args.seed)
    meta = ds.write(args.out)
    if ds.night_of:
        with open(Path(args.out) / "night_map.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["day_id", "night_id"])
            for d, n in sorted(ds.night_of.items()):
                w.writerow([d, n])
    print(f"wrote {len(ds.corpus)} records and {len(ds.images)} images to {args.out}")
    return [meta], []


# --- parser ---

def _add(p, *flags, required=False, **kw):
    """``add_argument`` that defers ``required`` until config values are merged."""
    action = p.add_argument(*flags, **kw)
    if required:
        action.required = False
        p._nprkit_required = getattr(p, "_nprkit_required", []) + [action]
    return action


def _corpus_flags(p, required=True):
    _add(p, "--corpus", type=Path, required=required, help="metadata JSONL")
    _add(p, "--image-root", type=Path, help="image directory (default: the corpus file's folder)")


def _solar_flags(p):
    _add(p, "--sunset-zenith", type=float, default=90.833, help="zenith angle defining sunset, degrees")
    _add(p, "--sunset-offset", type=float, default=0.0, help="minutes added after sunset / before sunrise")


def _eval_flags(p):
    _add(p, "-n", "--n", type=_int_list, default=list(retrieval.DEFAULT_N_VALUES), help="comma-separated N values")
    _add(p, "--threshold", type=float, default=retrieval.DEFAULT_THRESHOLD_M, help="correctness radius, meters")
    _add(p, "--sunset-split", action="store_true", help="split Sunset queries at local sunset")
    _add(p, "--out", type=Path, required=True, help="report CSV")
    _add(p, "--svg", type=Path, help="also write a recall curve")


def build_parser():
    top = _Parser(prog="nprkit", description="Day/night visual place recognition toolkit.")
    top.add_argument("--version", action="version",
                     version=f"nprkit {__version__} (NPRE format v{NPRE_VERSION}, manifest v{MANIFEST_VERSION})")
    top.add_argument("--seed", type=int, default=42, help="seed for all randomness (default 42)")
    top.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    top.add_argument("--config", type=Path, default=None, help="TOML file with flag defaults")
    sub = top.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.required = True
    cmds = {}

    def command(name, fn, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(func=fn)
        cmds[name] = p
        return p

    p = command("ingest", cmd_ingest, "validate a metadata JSONL and write it back normalized")
    _corpus_flags(p)
    _add(p, "--relabel", choices=["none", "solar"], default="none",
         help="recompute Day/Night labels from the sun position for timestamped records")
    _solar_flags(p)
    _add(p, "--out", type=Path, required=True)

    p = command("night-sim", cmd_night_sim, "render day images in night style")
    _add(p, "--input", type=Path, required=True, help="image directory")
    _add(p, "--output", type=Path, required=True, help="output directory")
    _add(p, "--params", type=Path, help="JSON or TOML night parameters (flags override)")
    _add(p, "--exposure-gain", type=float)
    _add(p, "--gamma", type=float)
    _add(p, "--wb-shift", type=float, nargs=3, metavar=("R", "G", "B"))
    _add(p, "--vignette", type=float)
    _add(p, "--noise", type=float)
    _add(p, "--lights", type=int)

    p = command("luminance", cmd_luminance, "mean luminance and brightness label per image")
    _add(p, "--input", type=Path, required=True, help="image or directory")
    _add(p, "--threshold", type=float, default=photometry.DEFAULT_BRIGHTNESS_THRESHOLD)
    _add(p, "--out", type=Path, help="CSV (default: print)")

    p = command("solar", cmd_solar, "sunrise, sunset and sun elevation for a place and date")
    _add(p, "--lat", type=float, required=True)
    _add(p, "--lon", type=float, required=True)
    _add(p, "--date", required=True, help="YYYY-MM-DD (UTC)")
    _add(p, "--time", help="HH:MM[:SS] UTC; also print elevation and Day/Night at that instant")
    _solar_flags(p)

    p = command("partition", cmd_partition, "split the database into UTM cell x heading classes")
    _corpus_flags(p)
    _add(p, "--cell-size", type=float, default=10.0, help="meters")
    _add(p, "--heading-bins", type=int, default=12)
    _add(p, "--out", type=Path, required=True, help="classes JSONL")

    p = command("mine", cmd_mine, "mine (anchor, positive, negative) triplets")
    _corpus_flags(p)
    _add(p, "--r-pos", type=float, default=10.0, help="positive radius, meters")
    _add(p, "--r-neg", type=float, default=25.0, help="negative radius, meters")
    _add(p, "--per-anchor", type=int, default=10)
    _add(p, "--out", type=Path, required=True, help="triplets JSONL")
    _add(p, "--skipped-out", type=Path, help="list of skipped anchor ids")

    p = command("embed", cmd_embed, "baseline descriptors (optionally projected by a trained head)")
    _corpus_flags(p)
    _add(p, "--role", choices=["all", "database", "query"], default="all")
    _add(p, "--head", type=Path, help="projection head (.npy)")
    _add(p, "--out", type=Path, required=True, help="NPRE file")

    p = command("train", cmd_train, "train a linear projection head")
    _add(p, "--descriptors", type=Path, required=True, help="NPRE descriptors")
    _add(p, "--loss", choices=["triplet", "lmcl"], default="triplet")
    _add(p, "--triplets", type=Path, help="triplets JSONL (triplet loss)")
    _add(p, "--classes", type=Path, help="classes JSONL (lmcl loss)")
    _add(p, "--night-descriptors", type=Path, help="NPRE descriptors of night-rendered copies")
    _add(p, "--night-map", type=Path, help="day_id,night_id CSV (default: identical ids)")
    _add(p, "--anchor-mode", choices=[m.value for m in embed.AnchorMode], default="augment")
    _add(p, "--margin", type=float, default=0.1)
    _add(p, "--s", type=float, default=30.0, help="LMCL scale")
    _add(p, "--m", type=float, default=0.35, help="LMCL margin")
    _add(p, "--lr", type=float, help=f"learning rate (default {embed.FRESH_TRAIN_LR}, {embed.FINE_TUNE_LR} with --init)")
    _add(p, "--epochs", type=int, default=10)
    _add(p, "--batch-size", type=int, default=32)
    _add(p, "--out-dim", type=int, default=64)
    _add(p, "--clip-norm", type=float, default=10.0)
    _add(p, "--negatives", choices=[s.value for s in embed.NegativeStrategy], default="random")
    _add(p, "--init", type=Path, help="start from this head (fine-tuning)")
    _add(p, "--out", type=Path, required=True, help="head (.npy)")
    _add(p, "--history", type=Path, help="per-epoch loss CSV")

    p = command("index", cmd_index, "build a retrieval index from database embeddings")
    _add(p, "--embeddings", type=Path, required=True)
    _corpus_flags(p, required=False)
    _add(p, "--out", type=Path, required=True, help="NPRE index")

    p = command("search", cmd_search, "exact top-k cosine search")
    _add(p, "--index", type=Path, required=True)
    _add(p, "--queries", type=Path, required=True, help="NPRE query embeddings")
    _corpus_flags(p, required=False)
    _add(p, "-k", type=int, default=20)
    _add(p, "--out", type=Path, required=True, help="results JSONL")

    p = command("eval", cmd_eval, "recall@N by condition")
    _corpus_flags(p)
    _add(p, "--results", type=Path, required=True)
    _solar_flags(p)
    _eval_flags(p)

    p = command("route-eval", cmd_route_eval, "route queries to day/night pipelines and evaluate")
    _corpus_flags(p)
    _add(p, "--day-index", type=Path, required=True)
    _add(p, "--day-queries", type=Path, required=True)
    _add(p, "--night-index", type=Path, required=True)
    _add(p, "--night-queries", type=Path, required=True)
    _add(p, "--mode", choices=["hybrid", "brightness", "solar"], default="hybrid")
    _add(p, "--threshold-lum", type=float, default=photometry.DEFAULT_BRIGHTNESS_THRESHOLD,
         help="brightness threshold, fraction of full scale")
    _add(p, "-k", type=int, default=20)
    _add(p, "--tags-out", type=Path, help="route tags CSV")
    _add(p, "--results-out", type=Path, help="routed results JSONL")
    _solar_flags(p)
    _eval_flags(p)

    p = command("report", cmd_report, "recall curves from report CSVs as SVG")
    _add(p, "reports", nargs="+", help="CSV paths, optionally LABEL=PATH")
    _add(p, "--bucket", default="All")
    _add(p, "--title")
    _add(p, "--out", type=Path, required=True, help="SVG file")

    p = command("synth", cmd_synth, "write a procedural street-scene corpus")
    _add(p, "--kind", choices=["eval", "train"], default="eval")
    _add(p, "--places", type=int, default=100)
    _add(p, "--views", type=int, default=3, help="views per place (train)")
    _add(p, "--sunset-queries", type=int, default=0)
    _add(p, "--drop-timestamps", type=float, default=0.0)
    _add(p, "--out", type=Path, required=True, help="output directory")
    return top, cmds


# --- config merging ---

def _load_config(path):
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _apply_config(top, sub, argv, config, command):
    """Merge values: flags > config file > defaults. Returns the source of each value."""
    values = {k: v for k, v in config.items() if not isinstance(v, dict)}
    values.update(config.get(command, {}))
    known = {a.dest: a for a in top._actions + sub._actions}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise UsageError(f"unknown config keys for {command!r}: {', '.join(unknown)}")
    given = set()
    for a in top._actions + sub._actions:
        for opt in a.option_strings:
            if any(tok == opt or tok.startswith(opt + "=") for tok in argv):
                given.add(a.dest)
    sources = {}
    for dest, a in known.items():
        if dest in ("help", "version", "func"):
            continue
        if dest in given or (not a.option_strings and dest != "command"):
            sources[dest] = "flag"
        elif dest in values:
            sources[dest] = "config"
        else:
            sources[dest] = "default"
    return values, sources


def _convert(action, value):
    if action.type is None or value is None or isinstance(value, bool):
        return value
    if isinstance(value, list) and action.type not in (_int_list, _float_list):
        return [action.type(v) for v in value]
    if action.type in (_int_list, _float_list) and isinstance(value, list):
        return action.type(",".join(map(str, value)))
    return action.type(value)


def parse(argv):
    top, cmds = build_parser()
    args = top.parse_args(argv)
    sub = cmds[args.command]
    config = _load_config(args.config) if args.config is not None else {}
    values, sources = _apply_config(top, sub, argv, config, args.command)
    actions = {a.dest: a for a in top._actions + sub._actions}
    for dest, v in values.items():
        if sources.get(dest) == "config":
            setattr(args, dest, _convert(actions[dest], v))
    missing = [a for a in getattr(sub, "_nprkit_required", []) if getattr(args, a.dest) is None]
    if missing:
        sub.error("the following arguments are required: " + ", ".join(a.option_strings[-1] for a in missing))
    return args, sources


def _print_settings(args, sources):
    keys = sorted(k for k in sources if k != "command")
    print(f"nprkit {__version__} {args.command}", file=sys.stderr)
    for k in keys:
        print(f"  {k} = {_jsonable(getattr(args, k))!r} ({sources[k]})", file=sys.stderr)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, sources = parse(argv)
    except UsageError as exc:
        print(f"nprkit: error: {exc}", file=sys.stderr)
        return 1
    if args.threads is not None:
        if args.threads < 1:
            print("nprkit: error: --threads must be at least 1", file=sys.stderr)
            return 1
        _parallel.set_threads(args.threads)
    _print_settings(args, sources)
    started = _now()
    try:
        outputs, inputs = args.func(args)
    except UsageError as exc:
        print(f"nprkit: error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"nprkit: data error: {exc}", file=sys.stderr)
        return 2
    if outputs:
        flags = {k: getattr(args, k) for k in sources}
        flags["command"] = args.command
        write_manifest(outputs[0], args.command, flags, inputs, args.seed, started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
