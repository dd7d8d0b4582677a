#!/usr/bin/env python3
"""Convert public benchmark downloads into the CSV layout read by `alf`.

Usage:
    prepare_benchmarks.py income   [--adult-data PATH]      # UCI census income (adult.data)
    prepare_benchmarks.py blastchar --csv PATH              # Telco customer churn CSV
    prepare_benchmarks.py adult --data PATH --solution PATH # ChaLearn AutoML "adult"

Without --adult-data the income file is pulled out of the `responsibly`
wheel, which bundles the original UCI files.
"""
import argparse
import csv
import glob
import json
import os
import subprocess
import sys
import tempfile
import zipfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

INCOME_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education-num", "marital-status",
    "occupation", "relationship", "race", "sex", "capital-gain", "capital-loss",
    "hours-per-week", "native-country", "income",
]


def income_lines(path):
    if path:
        with open(path) as fh:
            return fh.read().splitlines()
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.check_call(
            [sys.executable, "-m", "pip", "download", "--no-deps", "--timeout", "120",
             "-d", tmp, "responsibly==0.1.2"])
        wheel = glob.glob(os.path.join(tmp, "*.whl"))[0]
        raw = zipfile.ZipFile(wheel).read("responsibly/dataset/adult/adult.data")
        return raw.decode().splitlines()


def prepare_income(args):
    out = os.path.join(ROOT, "data", "1995_income", "data.csv")
    rows = 0
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(INCOME_COLUMNS)
        for line in income_lines(args.adult_data):
            cells = [c.strip() for c in line.split(",")]
            if len(cells) != len(INCOME_COLUMNS):
                continue
            w.writerow(["" if c == "?" else c for c in cells])
            rows += 1
    print(f"wrote {rows} rows to {out}")


def prepare_blastchar(args):
    out = os.path.join(ROOT, "data", "blastchar", "data.csv")
    with open(args.csv) as src, open(out, "w", newline="") as dst:
        r = csv.reader(src)
        w = csv.writer(dst)
        for row in r:
            w.writerow([c.strip() for c in row])
    print(f"wrote {out}")


def prepare_adult(args):
    out = os.path.join(ROOT, "data", "adult", "data.csv")
    with open(args.data) as fh:
        feats = [line.split() for line in fh if line.strip()]
    with open(args.solution) as fh:
        sol = [line.split() for line in fh if line.strip()]
    width = len(feats[0])
    with open(out, "w", newline="") as dst:
        w = csv.writer(dst)
        w.writerow([f"f{i}" for i in range(width)] + ["label"])
        for x, y in zip(feats, sol):
            label = int(float(y[-1]) > 0.5) if len(y) > 1 else int(float(y[0]) > 0)
            w.writerow(["" if v.lower() == "nan" else v for v in x] + [label])
    # the AutoML release is already numerically encoded
    schema = {
        "features": [{"name": f"f{i}", "kind": "numeric", "normalization": {"method": "zscore"}} for i in range(width)],
        "tasks": [{"name": "label", "classes": 2, "labels": ["0", "1"], "gamma": 0.0}],
        "delimiter": ",",
        "missing_tokens": [""],
    }
    with open(os.path.join(ROOT, "data", "adult", "schema.json"), "w") as fh:
        json.dump(schema, fh, indent=1)
    print(f"wrote {len(feats)} rows to {out}")


def main():
    p = argparse.ArgumentParser()
    sub = p.add_subparsers(dest="which", required=True)
    a = sub.add_parser("income")
    a.add_argument("--adult-data")
    b = sub.add_parser("blastchar")
    b.add_argument("--csv", required=True)
    c = sub.add_parser("adult")
    c.add_argument("--data", required=True)
    c.add_argument("--solution", required=True)
    args = p.parse_args()
    {"income": prepare_income, "blastchar": prepare_blastchar, "adult": prepare_adult}[args.which](args)


if __name__ == "__main__":
    main()
