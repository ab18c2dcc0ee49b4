"""CLI: `export --audio-dir D --out S.w2ve [--layer N]` and `verify S.w2ve`."""
from __future__ import annotations

import argparse
import json
import sys

from .store import verify_store


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="teacher-export", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("export")
    p.add_argument("--audio-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layer", type=int, default=-1,
                   help="hidden-state index; -1 = final context layer")
    p.add_argument("--checkpoint", default="facebook/wav2vec2-base",
                   help="hub id or local path of the teacher model")
    p.add_argument("--no-normalize", action="store_true",
                   help="skip per-clip zero-mean/unit-variance input scaling")
    p.add_argument("--manifest", help="write an export manifest JSON here")

    p = sub.add_parser("verify")
    p.add_argument("store")

    args = ap.parse_args(argv)
    if args.cmd == "export":
        from .export import export_embeddings
        try:
            manifest = export_embeddings(
                args.audio_dir, args.out, layer=args.layer,
                checkpoint=args.checkpoint, normalize=not args.no_normalize,
                manifest_path=args.manifest)
        except Exception as e:
            print(f"error: {e}", file=sys.stderr)
            return 2
        print(json.dumps({"records": len(manifest.utterance_ids),
                          "skipped": len(manifest.skipped),
                          "checkpoint_hash": manifest.checkpoint_hash}))
        return 0

    try:
        report = verify_store(args.store)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(json.dumps(report))
    return 0 if report["ok"] else 1


if __name__ == "__main__":
    sys.exit(main())
