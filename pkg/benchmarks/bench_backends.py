"""Compare the gmpy2 and pure-Python big-integer backends.

Each backend runs in its own interpreter (the choice is fixed at import via
POPCORN_BIGINT).  Prints CSV: backend, key_bits, operation, reps, ms_per_op.

    python3 benchmarks/bench_backends.py [--bits 1024] [--reps 50]
"""
import argparse
import csv
import json
import os
import subprocess
import sys
import time

WORKER = r"""
import json, sys, time
from popcorn import _bigint, paillier
from popcorn.models import toy_input, toy_model
from popcorn.rng import Rng
from popcorn.session import SessionConfig, loopback_session

bits, reps = int(sys.argv[1]), int(sys.argv[2])
rng = Rng(1)
pk, sk = paillier.keygen(bits, rng)
out = {"backend": _bigint.BACKEND}

def clock(name, fn, n):
    t = time.perf_counter()
    for _ in range(n):
        fn()
    out[name] = (time.perf_counter() - t) * 1000 / n

exp = rng.randbits(bits)
base = rng.randbelow(pk.n_squared)
c = paillier.encrypt(42, pk, rng)
clock("powmod_full_exponent", lambda: _bigint.powmod(base, exp, pk.n_squared), reps)
clock("encrypt", lambda: paillier.encrypt(7, pk, rng), reps)
clock("decrypt", lambda: paillier.decrypt(c, sk), reps)
clock("hmul_plain_64bit", lambda: paillier.hmul_plain(c, 2 ** 63 + 5, pk), reps)
model = toy_model("toy-b")
x = toy_input(model, 0)
clock("toy_b_session", lambda: loopback_session(model, x, SessionConfig(key_bits=bits, seed=3), key=sk), 1)
print(json.dumps(out))
"""


def run_backend(name, bits, reps):
    env = dict(os.environ, POPCORN_BIGINT=name)
    proc = subprocess.run([sys.executable, "-c", WORKER, str(bits), str(reps)], env=env,
                          capture_output=True, text=True, check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--bits", type=int, default=1024)
    ap.add_argument("--reps", type=int, default=50)
    args = ap.parse_args()
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["backend", "key_bits", "operation", "reps", "ms_per_op"])
    for name in ("gmpy2", "builtin"):
        try:
            res = run_backend(name, args.bits, args.reps)
        except subprocess.CalledProcessError as exc:
            print(f"# {name} unavailable: {exc.stderr.strip().splitlines()[-1]}", file=sys.stderr)
            continue
        for op, ms in res.items():
            if op != "backend":
                w.writerow([res["backend"], args.bits, op, 1 if op == "toy_b_session" else args.reps, f"{ms:.3f}"])


if __name__ == "__main__":
    main()
