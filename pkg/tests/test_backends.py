import hashlib
import os
import subprocess
import sys

import pytest

from popcorn import _bigint

DIGEST = r"""
import hashlib
from popcorn.models import toy_input, toy_model
from popcorn.session import SessionConfig, loopback_session
m = toy_model("toy-a")
r = loopback_session(m, toy_input(m, 1), SessionConfig(key_bits=512, seed=77), capture=True)
h = hashlib.sha256(b"".join(d.encode() + f for d, f in r.transcript))
print(h.hexdigest(), r.logits.tolist())
"""


def _run(backend, code=DIGEST):
    env = dict(os.environ, POPCORN_BIGINT=backend)
    return subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)


def test_backends_agree_bit_for_bit():
    fast, slow = _run("gmpy2"), _run("builtin")
    assert fast.returncode == 0 and slow.returncode == 0, fast.stderr + slow.stderr
    assert fast.stdout == slow.stdout


def test_backend_flag_validation():
    bad = _run("fortran", "import popcorn")
    assert bad.returncode != 0 and "POPCORN_BIGINT" in bad.stderr
    forced = _run("builtin", "from popcorn import _bigint; print(_bigint.BACKEND)")
    assert forced.stdout.strip() == "builtin"


@pytest.mark.parametrize("a,m", [(3, 143), (2, 2 ** 127 - 1), (12345, 10 ** 20 + 39)])
def test_kernels_match_python(a, m):
    assert _bigint.powmod(a, 65537, m) == pow(a, 65537, m)
    assert _bigint.invert(a, m) == pow(a, -1, m)
    with pytest.raises(ValueError):
        _bigint.invert(11, 143)
