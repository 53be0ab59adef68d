"""Runs every CLI stage on a small synthetic corpus, for determinism checks."""

from pathlib import Path

from nprkit.cli import main


def run(root, threads, seed=42, places=30):
    root = Path(root)

    def cli(*argv):
        code = main(["--seed", str(seed), "--threads", str(threads), *map(str, argv)])
        assert code == 0, argv

    tr, ev = root / "train", root / "eval"
    cli("synth", "--kind", "train", "--places", places, "--out", tr)
    cli("synth", "--kind", "eval", "--places", places, "--sunset-queries", 8,
        "--drop-timestamps", 0.3, "--out", ev)
    cli("ingest", "--corpus", tr / "metadata.jsonl", "--relabel", "solar", "--out", root / "ingested.jsonl",
        "--image-root", tr)
    cli("partition", "--corpus", tr / "metadata.jsonl", "--heading-bins", 1, "--out", root / "classes.jsonl")
    cli("mine", "--corpus", tr / "metadata.jsonl", "--out", root / "triplets.jsonl",
        "--skipped-out", root / "skipped.txt")
    cli("night-sim", "--input", tr / "images", "--output", root / "night" / "images")
    cli("luminance", "--input", root / "night" / "images", "--out", root / "luminance.csv")
    cli("embed", "--corpus", tr / "metadata.jsonl", "--out", root / "train.npre")
    cli("embed", "--corpus", tr / "metadata.jsonl", "--image-root", root / "night", "--out", root / "train_night.npre")
    common = ("--epochs", 3, "--out-dim", 16)
    cli("train", "--descriptors", root / "train.npre", "--triplets", root / "triplets.jsonl",
        "--negatives", "hardest-in-batch", "--out", root / "day.npy", "--history", root / "day_hist.csv", *common)
    cli("train", "--descriptors", root / "train.npre", "--triplets", root / "triplets.jsonl",
        "--night-descriptors", root / "train_night.npre", "--anchor-mode", "replace",
        "--out", root / "night.npy", *common)
    cli("train", "--descriptors", root / "train.npre", "--loss", "lmcl", "--classes", root / "classes.jsonl",
        "--out", root / "lmcl.npy", *common)
    for head in ("day", "night"):
        cli("embed", "--corpus", ev / "metadata.jsonl", "--role", "database", "--head", root / f"{head}.npy",
            "--out", root / f"{head}_db.npre")
        cli("embed", "--corpus", ev / "metadata.jsonl", "--role", "query", "--head", root / f"{head}.npy",
            "--out", root / f"{head}_q.npre")
        cli("index", "--embeddings", root / f"{head}_db.npre", "--out", root / f"{head}.index")
        cli("search", "--index", root / f"{head}.index", "--queries", root / f"{head}_q.npre", "-k", 10,
            "--out", root / f"{head}_results.jsonl")
        cli("eval", "--corpus", ev / "metadata.jsonl", "--results", root / f"{head}_results.jsonl",
            "--sunset-split", "-n", "1,5,10", "--out", root / f"{head}_report.csv", "--svg", root / f"{head}.svg")
    cli("route-eval", "--corpus", ev / "metadata.jsonl",
        "--day-index", root / "day.index", "--day-queries", root / "day_q.npre",
        "--night-index", root / "night.index", "--night-queries", root / "night_q.npre",
        "-k", 10, "-n", "1,5,10", "--tags-out", root / "tags.csv", "--results-out", root / "dc_results.jsonl",
        "--out", root / "dc_report.csv")
    cli("report", f"day={root / 'day_report.csv'}", f"dc={root / 'dc_report.csv'}", "--out", root / "curves.svg")
    return artifacts(root)


def artifacts(root):
    """Every file under ``root`` except run manifests, as bytes."""
    root = Path(root)
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and not p.name.endswith(".manifest.json")}
