#!/usr/bin/env python3
"""Materialize the GunPoint, Coffee and ItalyPowerDemand splits in UCR2018 layout.

The archive files ship inside the `pyts` and `aeon` wheels on PyPI, so this
script downloads those wheels (no install) and rewrites the relevant members
as `<out>/<Name>/<Name>_{TRAIN,TEST}.tsv`: label in the first field, values
tab-separated.
"""
import argparse
import glob
import os
import subprocess
import tempfile
import zipfile


def write_tsv(path, rows):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as f:
        for label, values in rows:
            f.write("\t".join([label] + values) + "\n")


def label_str(x):
    v = float(x)
    return str(int(v)) if v.is_integer() else x


def from_pyts(z, name, split):
    text = z.read(f"pyts/datasets/cached_datasets/UCR/{name}/{name}_{split}.txt").decode()
    rows = []
    for line in text.splitlines():
        fields = line.split()
        if fields:
            rows.append((label_str(fields[0]), fields[1:]))
    return rows


def from_aeon_ts(z, name, split):
    text = z.read(f"aeon/datasets/data/{name}/{name}_{split}.ts").decode()
    rows, in_data = [], False
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.lower() == "@data":
            in_data = True
            continue
        if in_data:
            values, label = line.rsplit(":", 1)
            rows.append((label_str(label), values.split(",")))
    return rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data", "ucr"))
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.check_call(
            ["pip", "download", "--no-deps", "-q", "-d", tmp, "pyts==0.13.0", "aeon==1.3.0"]
        )
        pyts = zipfile.ZipFile(glob.glob(os.path.join(tmp, "pyts-*.whl"))[0])
        aeon = zipfile.ZipFile(glob.glob(os.path.join(tmp, "aeon-*.whl"))[0])
        for split in ("TRAIN", "TEST"):
            for name in ("GunPoint", "Coffee"):
                write_tsv(os.path.join(args.out, name, f"{name}_{split}.tsv"), from_pyts(pyts, name, split))
            write_tsv(
                os.path.join(args.out, "ItalyPowerDemand", f"ItalyPowerDemand_{split}.tsv"),
                from_aeon_ts(aeon, "ItalyPowerDemand", split),
            )


if __name__ == "__main__":
    main()
