"""Command-line entry point: ``popcorn <command> [options]``.

Exit status: 0 success, 1 runtime error, 2 usage error, 3 protocol abort.
"""
import argparse
import csv
import json
import os
import statistics
import sys
from dataclasses import fields

import numpy as np

from . import paillier, plain
from .compress import (LINEAR_KINDS, DenseReal, PruneQuantReport, build_model, compress_model,
                       layer_priority_report, load_model_json, read_model, write_model)
from .encoding import read_tensor, write_tensor
from .errors import ConfigurationError, PopcornError, ProtocolAbort
from .linear import OpCounter
from .models import TOYS, toy_input, toy_model
from .protocols import ReluConfig
from .rng import Rng
from .session import SessionConfig, connect_tcp, loopback_session, serve_tcp

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3

BENCH_FIELDS = ("layer",) + tuple(f.name for f in fields(OpCounter)) + (
    "bytes_server_to_client", "bytes_client_to_server", "seconds",
    "key_bits", "scale", "dummy_min", "fusion", "diff_kernel")


class UsageError(Exception):
    pass


def thread_cap():
    """Worker cap from ``POPCORN_THREADS`` (default 1)."""
    raw = os.environ.get("POPCORN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"POPCORN_THREADS must be a positive integer, not {raw!r}") from None
    if n < 1:
        raise UsageError("POPCORN_THREADS must be >= 1")
    return n


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).lower()
    if s in ("1", "true", "on", "yes"):
        return True
    if s in ("0", "false", "off", "no"):
        return False
    raise UsageError(f"not a boolean: {v!r}")


_SESSION_KEYS = {"key_bits": int, "fusion": _bool, "diff_kernel": _bool, "plain_bound": int,
                 "blind_bound": int, "input_bound": int, "seed": int}
_RELU_KEYS = {"dummy_min": int, "dummy_frac": float, "dummy_zero_prob": float}


def parse_config(items):
    """Build a :class:`SessionConfig` from ``key=value`` items or ``@file.json``."""
    raw = {}
    for item in items or []:
        if item.startswith("@"):
            with open(item[1:]) as fh:
                raw.update(json.load(fh))
        elif "=" in item:
            k, v = item.split("=", 1)
            raw[k.strip()] = v.strip()
        else:
            raise UsageError(f"config item must be key=value or @file.json: {item!r}")
    sess, relu = {}, {}
    for k, v in raw.items():
        if k in _SESSION_KEYS:
            try:
                sess[k] = _SESSION_KEYS[k](v)
            except ValueError:
                raise UsageError(f"bad value for {k}: {v!r}") from None
        elif k in _RELU_KEYS:
            relu[k] = _RELU_KEYS[k](v)
        else:
            raise UsageError(f"unknown config key {k!r}")
    if sess.get("key_bits", 1024) not in paillier.SUPPORTED_BITS:
        raise UsageError(f"key_bits must be one of {paillier.SUPPORTED_BITS}")
    try:
        return SessionConfig(relu=ReluConfig(**relu), **sess)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None


def _host_port(text):
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise UsageError(f"expected host:port, got {text!r}")
    return host, int(port)


def _refuse_overwrite(path, force):
    if os.path.exists(path) and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")


def load_serving_model(ref):
    """A toy name, a PPMD file, or a JSON description (integerized at f=8)."""
    if ref.lower() in TOYS:
        return toy_model(ref)
    if ref.endswith(".json"):
        return compress_model(load_model_json(ref))
    model = read_model(ref)
    if any(l.kind in LINEAR_KINDS and isinstance(l.weights, DenseReal) for l in model.layers):
        raise UsageError("model has real-valued weights; run `popcorn compress` first")
    return model


def _write_csv(path, fieldnames, rows):
    fh = sys.stdout if path in (None, "-") else open(path, "w", newline="")
    try:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    finally:
        if fh is not sys.stdout:
            fh.close()


def stats_rows(server_stats, cfg, scale):
    echo = {"key_bits": cfg.key_bits, "scale": scale, "dummy_min": cfg.relu.dummy_min,
            "fusion": int(cfg.fusion), "diff_kernel": int(cfg.diff_kernel)}
    rows = []
    for r in server_stats.rows:
        row = {"layer": r.name, **r.ops.as_dict(), "bytes_server_to_client": r.bytes_sent,
               "bytes_client_to_server": r.bytes_received, "seconds": round(r.seconds, 6)}
        rows.append({**row, **echo})
    return rows


def with_total(rows):
    total = {"layer": "TOTAL"}
    for k in BENCH_FIELDS[1:]:
        vals = [r[k] for r in rows]
        total[k] = vals[0] if k in ("key_bits", "scale", "dummy_min", "fusion", "diff_kernel") else sum(vals)
    total["seconds"] = round(total["seconds"], 6)
    return rows + [total]


# -- commands --------------------------------------------------------------------

def cmd_keygen(args):
    if args.bits not in paillier.SUPPORTED_BITS:
        raise UsageError(f"--bits must be one of {paillier.SUPPORTED_BITS}")
    pub, sec = args.out + ".pub", args.out + ".key"
    for p in (pub, sec):
        _refuse_overwrite(p, args.force)
    rng = Rng(args.seed).child("keygen") if args.seed is not None else Rng(None)
    pk, sk = paillier.keygen(args.bits, rng)
    check = Rng(args.seed).child("selfcheck") if args.seed is not None else None
    m = 123456789 % pk.n
    if paillier.decrypt(paillier.encrypt(m, pk, check), sk) != m:
        raise PopcornError("generated key failed its round-trip self-check")
    with open(pub, "wb") as fh:
        fh.write(paillier.dump_public_key(pk))
    with open(sec, "wb") as fh:
        fh.write(paillier.dump_secret_key(sk))
    print(f"wrote {pub} and {sec} ({pk.bit_length}-bit modulus)")


def cmd_compress(args):
    if args.bits is not None and args.binarize:
        raise UsageError("--bits and --binarize are mutually exclusive")
    if not 0 <= args.prune < 1:
        raise UsageError("--prune must lie in [0, 1)")
    _refuse_overwrite(args.out, args.force)
    if args.model_in.lower() in TOYS:
        desc, seed = TOYS[args.model_in.lower()]
        model = build_model(desc, seed)
    elif args.model_in.endswith(".json"):
        model = load_model_json(args.model_in, args.seed)
    else:
        model = read_model(args.model_in)
    if any(l.kind in LINEAR_KINDS and not isinstance(l.weights, DenseReal) for l in model.layers):
        raise UsageError("input model is already integerized")
    out = compress_model(model, args.scale, args.prune, args.bits, args.binarize, args.seed)
    write_model(args.out, out)
    report = layer_priority_report(out)
    _write_csv(args.report, PruneQuantReport.CSV_FIELDS, report.rows())
    print(f"wrote {args.out}", file=sys.stderr)


def cmd_toy(args):
    _refuse_overwrite(args.out, args.force)
    model = toy_model(args.name)
    write_model(args.out, model)
    if args.input_out:
        _refuse_overwrite(args.input_out, args.force)
        write_tensor(args.input_out, toy_input(model, args.seed))
    print(f"wrote {args.out}", file=sys.stderr)


def cmd_serve(args):
    cfg = parse_config(args.config)
    model = load_serving_model(args.model)
    host, port = _host_port(args.listen)
    def ready(h, p):
        print(f"listening on {h}:{p}", file=sys.stderr, flush=True)

    stats = serve_tcp(model, host, port, cfg, once=not args.forever, on_ready=ready)
    if args.stats:
        _write_csv(args.stats, BENCH_FIELDS, with_total(stats_rows(stats, cfg, model.input_scale)))


def cmd_infer(args):
    cfg = parse_config(args.config)
    x = read_tensor(args.input)
    host, port = _host_port(args.connect)
    logits, stats = connect_tcp(x, host, port, cfg, timeout=args.timeout)
    if args.out:
        write_tensor(args.out, logits)
    print(" ".join(str(v) for v in logits.tolist()))
    print(f"argmax={int(np.argmax(logits.tolist()))} scale_exp={logits.scale_exp} "
          f"bytes_sent={stats.bytes_sent} bytes_received={stats.bytes_received} "
          f"round_trips={stats.round_trips}", file=sys.stderr)


def cmd_bench(args):
    cfg = parse_config(args.config)
    model = load_serving_model(args.model)
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    x = toy_input(model, 0)
    runs = []
    for trial in range(args.trials):
        res = loopback_session(model, x, cfg)
        runs.append(stats_rows(res.server, cfg, model.input_scale))
    rows = []
    for i, first in enumerate(runs[0]):
        row = dict(first)
        for k in ("seconds",) + tuple(f.name for f in fields(OpCounter)) + ("bytes_server_to_client", "bytes_client_to_server"):
            row[k] = statistics.median(run[i][k] for run in runs)
        row["seconds"] = round(row["seconds"], 6)
        rows.append(row)
    _write_csv(args.out, BENCH_FIELDS, with_total(rows))


def cmd_selftest(args):
    rng = Rng(args.seed)
    pk, sk = paillier.keygen(args.bits, rng.child("keygen"))
    for m in (0, 1, pk.n - 1, rng.randbelow(pk.n)):
        assert paillier.decrypt(paillier.encrypt(m, pk, rng), sk) == m
    a, b = rng.randbelow(pk.n), rng.randbelow(pk.n)
    assert paillier.decrypt(paillier.hadd(paillier.encrypt(a, pk, rng), paillier.encrypt(b, pk, rng), pk), sk) == (a + b) % pk.n
    print("paillier ok")
    for name in ("toy-a", "toy-b"):
        model = toy_model(name)
        x = toy_input(model, args.seed)
        res = loopback_session(model, x, SessionConfig(key_bits=args.bits, seed=args.seed), key=sk)
        want = plain.evaluate(model, x.values).ravel().tolist()
        if res.logits.tolist() != want:
            raise PopcornError(f"{name}: encrypted logits differ from the plaintext oracle")
        print(f"{name} ok ({res.client.round_trips} round trips, {res.client.bytes_sent + res.client.bytes_received} bytes)")


def build_parser():
    p = argparse.ArgumentParser(prog="popcorn", description="Oblivious CNN inference over Paillier encryption.")
    sub = p.add_subparsers(dest="command", required=True)
    cfg_help = "session option key=value (repeatable) or @file.json"

    k = sub.add_parser("keygen", help="generate a Paillier key pair (PPKY files)")
    k.add_argument("--bits", type=int, default=2048)
    k.add_argument("--seed", type=int)
    k.add_argument("--out", required=True, help="output prefix; writes PREFIX.pub and PREFIX.key")
    k.add_argument("--force", action="store_true")
    k.set_defaults(func=cmd_keygen)

    c = sub.add_parser("compress", help="fold BN, prune/quantize or binarize, integerize")
    c.add_argument("--model-in", required=True, help="PPMD real-valued model, JSON description or toy name")
    c.add_argument("--prune", type=float, default=0.0)
    c.add_argument("--bits", type=int)
    c.add_argument("--binarize", action="store_true")
    c.add_argument("--scale", type=int, default=8)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.add_argument("--report", default="-", help="prune/quant report CSV (default stdout)")
    c.add_argument("--force", action="store_true")
    c.set_defaults(func=cmd_compress)

    t = sub.add_parser("toy", help="export a bundled reference model")
    t.add_argument("--name", choices=sorted(TOYS), default="toy-b")
    t.add_argument("--out", required=True)
    t.add_argument("--input-out", help="also write a sample input tensor (PPTN)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_toy)

    s = sub.add_parser("serve", help="serve inferences over TCP")
    s.add_argument("--model", required=True, help="PPMD file, JSON description or toy name")
    s.add_argument("--listen", default="127.0.0.1:7878")
    s.add_argument("--config", action="append", help=cfg_help)
    s.add_argument("--stats", help="per-layer stats CSV")
    s.add_argument("--forever", action="store_true", help="keep serving after the first session")
    s.set_defaults(func=cmd_serve)

    i = sub.add_parser("infer", help="run an inference against a server")
    i.add_argument("--input", required=True, help="PPTN tensor at the model's input scale")
    i.add_argument("--connect", default="127.0.0.1:7878")
    i.add_argument("--config", action="append", help=cfg_help)
    i.add_argument("--out", help="write logits as PPTN")
    i.add_argument("--timeout", type=float, default=None)
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("bench", help="loopback sessions, per-layer CSV of op counts and bytes")
    b.add_argument("--model", default="toy-b")
    b.add_argument("--trials", type=int, default=1)
    b.add_argument("--config", action="append", help=cfg_help)
    b.add_argument("--out", default="-")
    b.set_defaults(func=cmd_bench)

    st = sub.add_parser("selftest", help="quick correctness check of the whole stack")
    st.add_argument("--bits", type=int, default=512)
    st.add_argument("--seed", type=int, default=1)
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        thread_cap()
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"popcorn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ProtocolAbort as exc:
        print(f"popcorn: session aborted (reason code {exc.code})", file=sys.stderr)
        return EXIT_ABORT
    except (PopcornError, OSError, ValueError) as exc:
        print(f"popcorn: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
