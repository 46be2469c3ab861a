import os

os.environ.setdefault("POPCORN_TEST_HOOKS", "1")

import pytest

from popcorn import paillier
from popcorn.encoding import SignedCodec
from popcorn.linear import OpCounter
from popcorn.protocols import ProtocolContext, ReluConfig, local_client
from popcorn.rng import Rng


@pytest.fixture(scope="session")
def key1024():
    return paillier.keygen(1024, Rng("tests-1024"))


@pytest.fixture(scope="session")
def key512():
    return paillier.keygen(512, Rng("tests-512"))


@pytest.fixture(scope="session")
def make_ctx(key512):
    """ProtocolContext wired to an in-process client."""
    pk, sk = key512

    def make(seed=0, relu_cfg=None, pk_sk=None):
        kpk, ksk = pk_sk or (pk, sk)
        rng = Rng(seed).child("server")
        one = paillier.encrypt(1, kpk, rng)
        return ProtocolContext(kpk, OpCounter(), one, rng, SignedCodec.for_key(kpk, 2 ** 40, 2 ** 40),
                               roundtrip=local_client(ksk, Rng(seed).child("client")),
                               relu_cfg=relu_cfg or ReluConfig())
    return make
