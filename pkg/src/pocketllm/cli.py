"""Command-line interface.

Subcommands: compress, decompress, stats, verify, histogram, export-recon.
Every run prints its resolved configuration (seed included) as a JSON
line. Exit codes: 0 success, 2 configuration error, 3 data error,
4 training divergence, 5 corrupt compressed file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .compressor import compress_model, reconstruct_layer
from .metrics import (
    EXPORT_HEADER,
    export_reconstruction,
    histogram_table,
    layer_metrics,
    weight_histogram,
)
from .pocket_format import (
    PocketFormatError,
    load_pocket_file,
    model_stats,
    save_pocket_file,
)
from .tensor_store import (
    LINEAR_ROLES,
    ManifestError,
    ROLES,
    load_manifest,
    save_manifest,
    split_rows,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_CORRUPT = 5


def _default_seed():
    env = os.environ.get("POCKET_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise SystemExit(f"POCKET_SEED must be an integer, got {env!r}")


def _print_config(command, options):
    print(f"resolved-config {command}:", json.dumps(options, sort_keys=True, default=str))


def _parse_roles(text):
    if text is None or text == "all":
        return None
    roles = [r.strip() for r in text.split(",") if r.strip()]
    bad = [r for r in roles if r not in ROLES]
    if bad:
        raise ValueError(f"unknown layer roles {bad}; valid roles: {ROLES}")
    return roles


def cmd_compress(args):
    seed = args.seed if args.seed is not None else _default_seed()
    options = {
        "manifest": args.manifest,
        "d": args.d,
        "k": args.k,
        "layers": args.layers or "all-linear",
        "scope": args.scope,
        "epochs": args.epochs,
        "batch_rows": args.batch_rows,
        "lr": args.lr,
        "lambda": getattr(args, "lambda"),
        "mlp_layers": args.mlp_layers,
        "hidden": args.hidden,
        "norm": "ln" if args.no_rln else "rln",
        "data_init": not args.no_data_init,
        "refresh_dead": not args.no_refresh,
        "commitment_beta": args.commitment_beta,
        "lloyd_every": args.lloyd_every,
        "seed": seed,
        "jobs": args.jobs,
        "out": args.out,
    }
    _print_config("compress", options)
    try:
        roles = _parse_roles(args.layers)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    manifest = load_manifest(args.manifest)

    wanted = set(LINEAR_ROLES if roles is None else roles)
    selected = [e for e in manifest.layers if e.role in wanted]
    if not selected:
        print("error: no layers match the requested roles", file=sys.stderr)
        return EXIT_CONFIG
    for e in selected:
        if e.d_out % args.d != 0:
            print(
                f"error: subvector length {args.d} does not divide d_out={e.d_out} "
                f"of layer {e.name!r}",
                file=sys.stderr,
            )
            return EXIT_CONFIG
    if args.k < 2:
        print("error: --k must be >= 2", file=sys.stderr)
        return EXIT_CONFIG

    model = compress_model(
        manifest,
        roles=roles,
        scope=args.scope,
        jobs=args.jobs,
        subvector_len=args.d,
        codebook_size=args.k,
        mlp_layers=args.mlp_layers,
        hidden=args.hidden,
        norm="ln" if args.no_rln else "rln",
        epochs=args.epochs,
        batch_rows=args.batch_rows,
        lr=args.lr,
        vq_weight=getattr(args, "lambda"),
        commitment_beta=args.commitment_beta,
        data_init=not args.no_data_init,
        refresh_dead=not args.no_refresh,
        lloyd_every=args.lloyd_every,
        seed=seed,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_pocket_file(model, out)
    reports_dir = Path(args.reports_dir) if args.reports_dir else out.parent
    reports_dir.mkdir(parents=True, exist_ok=True)
    for name, report in model.reports.items():
        (reports_dir / f"{out.stem}.{name}.report.csv").write_text(report.to_text())
        if args.keep_encoder:
            enc = report.encoder
            np.savez(
                reports_dir / f"{out.stem}.{name}.encoder.npz",
                params=enc.flatten(),
                width=enc.config.width,
                layers=enc.config.layers,
                hidden=enc.config.hidden,
            )
    print(f"wrote {out} ({out.stat().st_size} bytes), {len(model.layers)} layers")
    for name, report in model.reports.items():
        f = report.final
        flags = []
        if report.codebook_frozen:
            flags.append("codebook-frozen")
        if report.diverged:
            flags.append("diverged")
        print(
            f"layer {name}: mse_mean={f.mse_mean:.6g} rmse={f.rmse:.6g} "
            f"vq_sum={f.vq_sum:.6g} used={report.usage.used}/{report.usage.total}"
            + (" [" + ",".join(flags) + "]" if flags else "")
        )
    if model.failures:
        for name, msg in model.failures:
            print(f"failed layer {name}: {msg}", file=sys.stderr)
        return EXIT_DATA
    if any(r.diverged for r in model.reports.values()):
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_decompress(args):
    _print_config("decompress", {"file": args.file, "out_manifest": args.out_manifest})
    model = load_pocket_file(args.file)
    out_path = Path(args.out_manifest)
    named = []
    for cl in model.layers:
        named.append((cl.name, cl.role, cl.block_index, reconstruct_layer(cl)))
    save_manifest(out_path.parent, named, manifest_name=out_path.name)
    print(f"wrote {out_path} with {len(named)} reconstructed layers")
    return EXIT_OK


def cmd_stats(args):
    _print_config("stats", {"file": args.file})
    model = load_pocket_file(args.file)
    stats = model_stats(model, count_norm_params=not args.nfd_linear_only)
    print(EXPORT_HEADER)
    print("layer,n,d,k,n_fd,payload_bytes,ratio_params,ratio_bits")
    for s in stats.layers:
        print(
            f"{s.name},{s.n},{s.d},{s.k},{s.n_fd},{s.payload_bits // 8},"
            f"{s.ratio_params!r},{s.ratio_bits!r}"
        )
    print(
        f"TOTAL,,,,,"
        f"{stats.total_payload_bits // 8},{stats.ratio_params!r},{stats.ratio_bits!r}"
    )
    print(f"avg_bits: {stats.avg_bits!r}")
    print(f"avg_bits_index_only: {stats.avg_bits_index_only!r}")
    print(f"overhead_bytes: {stats.overhead_bytes}")
    print(f"file_bytes: {stats.file_bytes}")
    return EXIT_OK


def cmd_verify(args):
    _print_config("verify", {"manifest": args.manifest, "file": args.file})
    manifest = load_manifest(args.manifest)
    model = load_pocket_file(args.file)
    print(EXPORT_HEADER)
    print("layer,mse_mean,mse_top100,rmse,frobenius_rel_err")
    for cl in model.layers:
        entry = manifest.layer(cl.name)
        if (entry.d_in, entry.d_out) != (cl.d_in, cl.d_out):
            raise ManifestError(
                f"layer {cl.name!r}: manifest shape ({entry.d_in}, {entry.d_out}) "
                f"does not match compressed shape ({cl.d_in}, {cl.d_out})"
            )
        w = manifest.load_weights(cl.name).astype(np.float64)
        w_hat = reconstruct_layer(cl)
        s = split_rows(w, cl.d).data
        s_hat = split_rows(w_hat, cl.d).data
        m = layer_metrics(s, s_hat)
        print(
            f"{cl.name},{m.mse_mean!r},{m.mse_top100!r},{m.rmse!r},"
            f"{m.frobenius_rel_err!r}"
        )
    return EXIT_OK


def cmd_histogram(args):
    _print_config(
        "histogram",
        {
            "manifest": args.manifest,
            "layer": args.layer,
            "coverage": args.coverage,
            "bins": args.bins,
        },
    )
    manifest = load_manifest(args.manifest)
    w = manifest.load_weights(args.layer)
    centers, counts = weight_histogram(w, coverage=args.coverage, bins=args.bins)
    text = histogram_table(centers, counts)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def cmd_export_recon(args):
    _print_config(
        "export-recon",
        {
            "manifest": args.manifest,
            "file": args.file,
            "layer": args.layer,
            "window": [args.row0, args.col0, args.rows, args.cols],
        },
    )
    manifest = load_manifest(args.manifest)
    model = load_pocket_file(args.file)
    cl = model.layer(args.layer)
    w = manifest.load_weights(args.layer).astype(np.float64)
    w_hat = reconstruct_layer(cl)
    if w.shape != w_hat.shape:
        raise ManifestError(
            f"layer {args.layer!r}: manifest shape {w.shape} does not match artifact"
        )
    text = export_reconstruction(
        w, w_hat, row0=args.row0, col0=args.col0, n_rows=args.rows, n_cols=args.cols
    )
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pocketllm",
        description="Compress weight matrices into codebook + indices + decoder artifacts.",
    )
    parser.add_argument("--version", action="version", version=f"pocketllm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compress", help="train artifacts for the layers of a manifest")
    c.add_argument("manifest")
    c.add_argument("--d", type=int, default=8, help="subvector length (default 8)")
    c.add_argument("--k", type=int, default=4096, help="codebook size (default 4096)")
    c.add_argument(
        "--layers",
        default=None,
        help="comma-separated roles to compress (default: all linear roles)",
    )
    c.add_argument("--scope", choices=("per_layer", "per_block"), default="per_layer")
    c.add_argument("--epochs", type=int, default=25)
    c.add_argument("--batch-rows", type=int, default=64, dest="batch_rows")
    c.add_argument("--lr", type=float, default=1e-3)
    c.add_argument("--lambda", type=float, default=1.0, help="latent quantization weight")
    c.add_argument("--mlp-layers", type=int, default=3, dest="mlp_layers")
    c.add_argument("--hidden", type=int, default=None)
    c.add_argument("--no-rln", action="store_true", help="per-subvector norm instead of row-grouped")
    c.add_argument("--no-data-init", action="store_true", help="standard-normal codebook init")
    c.add_argument("--no-refresh", action="store_true", help="disable dead-codeword refresh")
    c.add_argument("--commitment-beta", type=float, default=None)
    c.add_argument("--lloyd-every", type=int, default=0)
    c.add_argument("--seed", type=int, default=None, help="default: POCKET_SEED or 0")
    c.add_argument("--jobs", type=int, default=1, help="layers compressed concurrently")
    c.add_argument("--out", required=True)
    c.add_argument("--reports-dir", default=None)
    c.add_argument("--keep-encoder", action="store_true", help="write encoder sidecars")
    c.set_defaults(func=cmd_compress)

    dp = sub.add_parser("decompress", help="reconstruct weight tensors from an artifact file")
    dp.add_argument("file")
    dp.add_argument("--out-manifest", required=True, dest="out_manifest")
    dp.set_defaults(func=cmd_decompress)

    st = sub.add_parser("stats", help="size accounting and compression ratios")
    st.add_argument("file")
    st.add_argument(
        "--nfd-linear-only",
        action="store_true",
        help="exclude norm affine parameters from the decoder count in ratio formulas",
    )
    st.set_defaults(func=cmd_stats)

    vf = sub.add_parser("verify", help="reconstruction metrics against original tensors")
    vf.add_argument("manifest")
    vf.add_argument("file")
    vf.set_defaults(func=cmd_verify)

    hg = sub.add_parser("histogram", help="value histogram of one original layer")
    hg.add_argument("manifest")
    hg.add_argument("--layer", required=True)
    hg.add_argument("--coverage", type=float, default=0.999)
    hg.add_argument("--bins", type=int, default=100)
    hg.add_argument("--out", default=None)
    hg.set_defaults(func=cmd_histogram)

    xr = sub.add_parser("export-recon", help="paired original/reconstructed value window")
    xr.add_argument("manifest")
    xr.add_argument("file")
    xr.add_argument("--layer", required=True)
    xr.add_argument("--row0", type=int, default=0)
    xr.add_argument("--col0", type=int, default=0)
    xr.add_argument("--rows", type=int, default=16)
    xr.add_argument("--cols", type=int, default=4)
    xr.add_argument("--out", default=None)
    xr.set_defaults(func=cmd_export_recon)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ManifestError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PocketFormatError as exc:
        print(f"corrupt file: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except KeyError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
