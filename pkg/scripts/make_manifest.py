#!/usr/bin/env python3
"""Build a split manifest for a locally installed ESD, RAVDESS or SAVEE copy.

    python scripts/make_manifest.py esd /data/ESD esd_manifest.csv
    python scripts/make_manifest.py ravdess /data/RAVDESS ravdess.csv --speaker-disjoint

No audio is copied; the manifest stores paths into the given directory.
"""
import argparse
import sys

from strengthnet.datasets import esd_manifest, ravdess_manifest, save_manifest, savee_manifest, split_manifest
from strengthnet.errors import StrengthNetError

BUILDERS = {"esd": esd_manifest, "ravdess": ravdess_manifest, "savee": savee_manifest}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("corpus", choices=sorted(BUILDERS))
    ap.add_argument("root")
    ap.add_argument("out")
    ap.add_argument("--dataset-id", help="override the dataset_id column")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--speaker-disjoint", action="store_true")
    ap.add_argument("--no-split", action="store_true")
    args = ap.parse_args(argv)
    try:
        kw = {"dataset_id": args.dataset_id} if args.dataset_id else {}
        manifest = BUILDERS[args.corpus](args.root, **kw)
        if len(manifest) == 0:
            raise StrengthNetError(f"no {args.corpus} audio found under {args.root}")
        if not args.no_split:
            manifest = split_manifest(manifest, rng_seed=args.seed, speaker_disjoint=args.speaker_disjoint)
    except StrengthNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    save_manifest(manifest, args.out)
    counts = {s: len(manifest.filter(split=s)) for s in ("train", "val", "test", "unassigned")}
    print(f"{len(manifest)} utterances -> {args.out} {counts}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
