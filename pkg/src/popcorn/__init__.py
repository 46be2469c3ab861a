"""Oblivious CNN inference: a server evaluates a compressed network over a
client's Paillier-encrypted input, running ReLU and max-pooling through
blinded round trips with the key holder."""
from .encoding import EncTensor, PlainTensor, SignedCodec
from .errors import (AbortReason, BoundOverflowError, ConfigurationError, DomainError, FormatError,
                     PopcornError, ProtocolAbort, ShapeError)
from .paillier import PublicKey, SecretKey, decrypt, encrypt, keygen
from .session import SessionConfig, loopback_session, run_client, run_server

__version__ = "0.1.0"
