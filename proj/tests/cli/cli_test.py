#!/usr/bin/env python3
"""End-to-end checks of the cbag command line, one scenario per invocation."""

import argparse
import json
import shutil
import subprocess
import sys
from pathlib import Path

TINY = ["d_model=16", "ff_size=32", "encoder_blocks=1", "decoder_blocks=1", "batch_size=4", "warmup=5",
        "log_every=1"]


class Ctx:
    def __init__(self, args):
        self.cli = args.cli
        self.data = Path(args.data)
        self.schema = Path(args.schema)
        self.work = Path(args.work)
        if self.work.exists():
            shutil.rmtree(self.work)
        self.work.mkdir(parents=True)
        self.corpus = self.data / "toy_corpus.jsonl"

    def run(self, *argv, expect=0):
        proc = subprocess.run([self.cli, *map(str, argv)], capture_output=True, text=True)
        if expect is not None and proc.returncode != expect:
            raise AssertionError(f"{' '.join(map(str, argv))}: exit {proc.returncode}, expected {expect}\n"
                                 f"stdout: {proc.stdout}\nstderr: {proc.stderr}")
        return proc

    def path(self, name):
        return self.work / name

    def prepare(self):
        """Tokenizer and vocabularies for the toy corpus."""
        self.run("train-tokenizer", "--input", self.corpus, "--vocab-size", 256, "--out", self.path("tok.model"))
        self.run("build-vocab", "--input", self.corpus, "--min-count", 1, "--out", self.path("cond.tsv"))

    def train(self, steps, *extra, ckpt_dir=None, log=None, resume=None, expect=0):
        argv = ["train", "--data", self.corpus, "--tokenizer", self.path("tok.model"), "--vocab",
                self.path("cond.tsv"), "--set", f"steps={steps}"]
        for kv in TINY:
            argv += ["--set", kv]
        if ckpt_dir:
            argv += ["--checkpoint-dir", ckpt_dir]
        if log:
            argv += ["--log", log]
        if resume:
            argv += ["--resume", resume]
        return self.run(*argv, *extra, expect=expect)


def check(cond, message):
    if not cond:
        raise AssertionError(message)


def read_jsonl(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def scenario_split(c):
    c.run("split", "--input", c.corpus, "--train-out", c.path("a_train.jsonl"), "--test-out",
          c.path("a_test.jsonl"), "--train-fraction", 0.5, "--seed", 3)
    c.run("split", "--input", c.corpus, "--train-out", c.path("b_train.jsonl"), "--test-out",
          c.path("b_test.jsonl"), "--train-fraction", 0.5, "--seed", 3)
    train, test = read_jsonl(c.path("a_train.jsonl")), read_jsonl(c.path("a_test.jsonl"))
    check(len(train) + len(test) == 8, f"split lost records: {len(train)} + {len(test)}")
    check({r["id"] for r in train}.isdisjoint({r["id"] for r in test}), "train and test overlap")
    check(c.path("a_train.jsonl").read_bytes() == c.path("b_train.jsonl").read_bytes(), "split not reproducible")
    c.run("split", "--input", c.corpus, "--train-out", c.path("x"), "--test-out", c.path("y"),
          "--train-fraction", 1.0, expect=1)
    proc = c.run("split", "--input", c.data / "malformed.jsonl", "--train-out", c.path("m_train.jsonl"),
                 "--test-out", c.path("m_test.jsonl"), "--train-fraction", 0.5)
    check("skipped" in proc.stderr, "malformed lines must be reported")
    kept = len(read_jsonl(c.path("m_train.jsonl"))) + len(read_jsonl(c.path("m_test.jsonl")))
    check(kept == 2, "valid lines of a damaged file must survive")


def scenario_tokenizer(c):
    c.run("train-tokenizer", "--input", c.corpus, "--vocab-size", 256, "--out", c.path("a.model"))
    c.run("train-tokenizer", "--input", c.corpus, "--vocab-size", 256, "--out", c.path("b.model"))
    check(c.path("a.model").read_bytes() == c.path("b.model").read_bytes(), "tokenizer training not reproducible")
    proc = c.run("train-tokenizer", "--input", c.corpus, "--vocab-size", 5, "--out", c.path("c.model"), expect=1)
    check("alphabet" in proc.stderr, "undersized vocabulary must be explained")


def scenario_vocab(c):
    proc = c.run("build-vocab", "--input", c.corpus, "--min-count", 1, "--out", c.path("cond.tsv"))
    check("26 years from 1990" in proc.stdout, f"unexpected vocab summary: {proc.stdout}")
    check(c.path("cond.tsv.labels.tsv").exists(), "label vocabulary not written next to the condition vocabulary")
    c.run("build-vocab", "--input", c.corpus, "--min-count", 1, "--max-year", 1980, "--out", c.path("bad.tsv"),
          expect=1)


def scenario_train_invalid_config(c):
    c.prepare()
    bad_key = c.path("bad_key.cfg")
    bad_key.write_text("preset = toy\nlearning_rat = 0.1\n")
    proc = c.run("train", "--config", bad_key, "--data", c.corpus, "--tokenizer", c.path("tok.model"), "--vocab",
                 c.path("cond.tsv"), expect=1)
    check("learning_rat" in proc.stderr, f"unknown key not named: {proc.stderr}")
    bad_value = c.path("bad_value.cfg")
    bad_value.write_text("heads = three\n")
    proc = c.run("train", "--config", bad_value, "--data", c.corpus, "--tokenizer", c.path("tok.model"), "--vocab",
                 c.path("cond.tsv"), expect=1)
    check("heads" in proc.stderr, f"bad value not named: {proc.stderr}")
    indivisible = c.path("indivisible.cfg")
    indivisible.write_text("d_model = 10\nheads = 3\n")
    proc = c.run("train", "--config", indivisible, "--data", c.corpus, "--tokenizer", c.path("tok.model"),
                 "--vocab", c.path("cond.tsv"), expect=1)
    check("heads" in proc.stderr or "d_model" in proc.stderr, f"invalid shape not named: {proc.stderr}")
    config = Path(__file__).resolve().parents[2] / "configs" / "toy.cfg"
    c.run("train", "--config", config, "--data", c.corpus, "--tokenizer", c.path("tok.model"), "--vocab",
          c.path("cond.tsv"), "--set", "steps=1", "--set", "d_model=16", "--set", "ff_size=16")


def scenario_train_resume(c):
    c.prepare()
    c.train(16, log=c.path("full.jsonl"), ckpt_dir=c.path("full"))
    c.train(6, ckpt_dir=c.path("part"))
    c.train(16, log=c.path("resumed.jsonl"), ckpt_dir=c.path("resumed"), resume=c.path("part") / "latest.bin")
    full, resumed = read_jsonl(c.path("full.jsonl")), read_jsonl(c.path("resumed.jsonl"))
    check([r["step"] for r in resumed] == list(range(7, 17)), f"resumed steps: {[r['step'] for r in resumed]}")
    check(resumed == full[6:], "resumed losses differ from the uninterrupted run")
    check((c.path("full") / "latest.bin").read_bytes() == (c.path("resumed") / "latest.bin").read_bytes(),
          "final checkpoints differ")
    proc = c.train(16, "--set", "lr=0.5", resume=c.path("part") / "latest.bin", expect=1)
    check("hash" in proc.stderr or "config" in proc.stderr, f"config mismatch not explained: {proc.stderr}")


def scenario_generate(c):
    c.prepare()
    c.train(4, ckpt_dir=c.path("ckpt"))
    ckpt = c.path("ckpt") / "latest.bin"
    common = ["generate", "--checkpoint", ckpt, "--title", "effects of exercise on memory", "--year", 2005,
              "--max-tokens", 12, "--seed", 9]
    c.run(*common, "--keywords", "exercise,memory", "--n", 3, "--out", c.path("a.jsonl"))
    c.run(*common, "--keywords", "exercise,memory", "--n", 3, "--workers", 2, "--out", c.path("b.jsonl"))
    check(c.path("a.jsonl").read_bytes() == c.path("b.jsonl").read_bytes(), "fixed seed must reproduce")
    rows = read_jsonl(c.path("a.jsonl"))
    check(len(rows) == 3, "--n 3 must give three generations")
    check([r["seed"] for r in rows] == [9, 10, 11], "per-sample seeds")
    for r in rows:
        check(r["termination"] in ("end_token", "max_tokens"), f"termination {r['termination']}")
    null = c.run(*common)
    check(json.loads(null.stdout)["keywords"] == [], "absent keywords must give the null condition")
    c.run("generate", "--checkpoint", ckpt, "--title", "memory", "--year", 1700, expect=1)
    c.run("generate", "--checkpoint", ckpt, "--records", c.corpus, "--temperature", 0, "--max-tokens", 4,
          "--out", c.path("greedy.jsonl"))
    check([r["id"] for r in read_jsonl(c.path("greedy.jsonl"))] == [f"toy-{i}" for i in range(1, 9)],
          "--records must prompt every record in order")


def perfect_generations(c, extra=()):
    """Generations that copy every reference abstract word for word."""
    rows = [{"id": rec["id"], "sentences": [" ".join(tok[0] for tok in s) for s in rec["sentences"]]}
            for rec in read_jsonl(c.corpus)]
    rows.extend(extra)
    out = c.path("perfect.jsonl")
    out.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return out


def scenario_evaluate_perfect(c):
    c.run("build-df", "--input", c.corpus, "--out", c.path("df.tsv"))
    gens = perfect_generations(c)
    c.run("evaluate", "--generations", gens, "--references", c.corpus, "--df", c.path("df.tsv"), "--out",
          c.path("report.json"))
    report = json.loads(c.path("report.json").read_text())
    check(report["metrics"]["bleu1"]["mean"] == 1.0, f"bleu1 mean {report['metrics']['bleu1']['mean']}")
    check(report["metrics"]["rouge_l"]["mean"] == 1.0, "rouge-l of perfect copies")
    check(report["unmatched_count"] == 0, "no unmatched ids expected")
    parallel = c.run("evaluate", "--generations", gens, "--references", c.corpus, "--df", c.path("df.tsv"),
                     "--workers", 3)
    check(json.loads(parallel.stdout) == report, "worker count changed the report")


def scenario_evaluate_schema(c):
    import jsonschema

    schema = json.loads(c.schema.read_text())
    c.run("build-df", "--input", c.corpus, "--out", c.path("df.tsv"))
    gens = perfect_generations(c, extra=[{"id": "nowhere-1", "generated": "insulin reduced glucose ."}])
    proc = c.run("evaluate", "--generations", gens, "--references", c.corpus, "--df", c.path("df.tsv"))
    report = json.loads(proc.stdout)
    jsonschema.validate(report, schema)
    check(report["unmatched_count"] == 1 and report["unmatched_ids"] == ["nowhere-1"], "unmatched id not surfaced")
    check("unmatched ids: 1" in proc.stderr, "unmatched count missing from the summary")
    for name, m in report["metrics"].items():
        check(abs(sum(m["histogram"]["mass"]) - 1.0) < 1e-9, f"{name} histogram mass")
    broken = dict(report)
    del broken["metrics"]
    try:
        jsonschema.validate(broken, schema)
    except jsonschema.ValidationError:
        pass
    else:
        raise AssertionError("schema accepted a report without metrics")


def scenario_exit_codes(c):
    c.run(expect=1)
    c.run("train-tokenizer", "--out", c.path("x"), expect=1)
    c.run("nonsense-command", expect=1)
    c.run("split", "--input", c.path("missing.jsonl"), "--train-out", c.path("a"), "--test-out", c.path("b"),
          expect=2)
    junk = c.path("junk.bin")
    junk.write_bytes(b"not a checkpoint at all")
    c.run("generate", "--checkpoint", junk, "--title", "memory", "--year", 2005, expect=2)
    c.run("evaluate", "--generations", c.path("missing.jsonl"), "--references", c.corpus, "--df", junk, expect=2)
    c.prepare()
    proc = c.train(30, "--set", "lr=1e30", "--set", "warmup=1", expect=3)
    check("non-finite" in proc.stderr, f"numerical failure not explained: {proc.stderr}")


SCENARIOS = {name[len("scenario_"):]: fn for name, fn in globals().items() if name.startswith("scenario_")}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cli", required=True)
    ap.add_argument("--data", required=True)
    ap.add_argument("--schema", required=True)
    ap.add_argument("--work", required=True)
    ap.add_argument("scenario", choices=sorted(SCENARIOS))
    args = ap.parse_args()
    try:
        SCENARIOS[args.scenario](Ctx(args))
    except AssertionError as e:
        print(f"FAIL {args.scenario}: {e}")
        return 1
    print(f"PASS {args.scenario}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
