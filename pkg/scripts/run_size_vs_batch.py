#!/usr/bin/env python3
"""Encrypted model size as a function of the packing batch size.

Tabulates serialized bundle sizes for a fixed model across batch sizes at a
fixed ring dimension: more values per ciphertext means fewer ciphertexts and
a smaller encrypted model.
"""
import argparse
import csv
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from fedsim.he.ckks import SchemeParams
from fedsim.secureagg import ciphertext_size_model


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/size_vs_batch.csv")
    ap.add_argument("--params", type=int, default=2_950_401, help="model size M")
    ap.add_argument("--ring-dim", type=int, default=8192)
    args = ap.parse_args()

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    batch = 8
    while batch <= args.ring_dim // 2:
        report = ciphertext_size_model(
            args.params,
            SchemeParams(ring_dim=args.ring_dim, batch_size=batch),
        )
        rows.append((batch, report.chunk_count, report.encrypted_bits,
                     report.plaintext_bits, report.encrypted_comm_bits))
        batch *= 2

    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["batch_size", "chunks", "encrypted_bits",
                         "plaintext_bits_32", "transfer_bits_64"])
        writer.writerows(rows)

    print(f"M={args.params}, ring_dim={args.ring_dim} -> {out}")
    for batch, chunks, enc_bits, *_ in rows:
        print(f"  batch {batch:5d}: {chunks:6d} chunks, {enc_bits / 8 / 2**20:9.1f} MiB encrypted")


if __name__ == "__main__":
    main()
