"""Two-party wire protocol: framing, handshake, layer orchestration, metering.

Frame layout (all integers big-endian)::

    u32 body_length | u8 tag | u32 seq | body

``seq`` is a single counter shared by both directions; each side checks that
every frame it receives carries the next expected number.  See
``docs/protocol.md`` for the per-message bodies.
"""
import math
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

from . import paillier
from .compress import LINEAR_KINDS, DenseInt, PrunedCodebook
from .encoding import (DEFAULT_BLIND_BOUND, DEFAULT_PLAIN_BOUND, EncTensor, PlainTensor,
                       SignedCodec, encrypt_tensor)
from .errors import AbortReason, BoundOverflowError, FormatError, ProtocolAbort, ShapeError
from .linear import OpCounter, eval_layer
from .protocols import (ProtocolContext, ReluConfig, client_respond, fused_conv_relu_maxpool,
                        fused_relu_maxpool, maxpool, relu)
from .rng import Rng

PROTOCOL_VERSION = 1
HEADER = struct.Struct(">IBI")
HEADER_BYTES = HEADER.size  # 9
MAX_BODY = 1 << 30


class MsgType:
    HELLO = 1
    META = 2
    PUBKEY = 3
    ENC_INPUT = 4
    BLINDED_BATCH = 5
    CLIENT_RESPONSE = 6
    RESULT = 7
    ABORT = 8

    NAMES = {1: "HELLO", 2: "META", 3: "PUBKEY", 4: "ENC_INPUT", 5: "BLINDED_BATCH",
             6: "CLIENT_RESPONSE", 7: "RESULT", 8: "ABORT"}


def frame_bytes(ciphertext_count, ciphertext_bytes):
    """Size of a frame whose body is ``ciphertext_count`` fixed-width ciphertexts."""
    return HEADER_BYTES + ciphertext_count * (4 + ciphertext_bytes)


# -- payload codecs ------------------------------------------------------------

def pack_batch(cells, pk):
    width = pk.ciphertext_bytes
    return b"".join(paillier.ciphertext_to_bytes(c, width) for c in cells)


def unpack_batch(body, pk):
    width = pk.ciphertext_bytes
    cells, off = [], 0
    while off < len(body):
        c, nxt = paillier.ciphertext_from_bytes(body, off)
        if nxt - off != 4 + width or not 0 < c.value < pk.n_squared:
            raise FormatError("malformed ciphertext in batch")
        cells.append(c)
        off = nxt
    return cells


@dataclass(frozen=True)
class ModelMeta:
    """Everything the client learns about the model."""
    layer_count: int
    activation_counts: tuple
    input_shape: tuple
    input_scale: int
    output_scale: int
    input_bound: int

    @classmethod
    def from_model(cls, model, input_bound):
        return cls(len(model.layers), tuple(model.activation_counts()), model.input_shape,
                   model.input_scale, model.output_scale, input_bound)

    def to_bytes(self):
        out = [struct.pack(">HB", self.layer_count, len(self.input_shape))]
        out.append(struct.pack(f">{len(self.input_shape)}I", *self.input_shape))
        out.append(struct.pack(">hh", self.input_scale, self.output_scale))
        raw = paillier.int_to_bytes(self.input_bound)
        out.append(struct.pack(">I", len(raw)) + raw)
        out.append(struct.pack(f">{self.layer_count}I", *self.activation_counts))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, body):
        try:
            count, rank = struct.unpack_from(">HB", body, 0)
            off = 3
            shape = struct.unpack_from(f">{rank}I", body, off)
            off += 4 * rank
            in_scale, out_scale = struct.unpack_from(">hh", body, off)
            off += 4
            (blen,) = struct.unpack_from(">I", body, off)
            off += 4
            bound = int.from_bytes(body[off:off + blen], "big")
            off += blen
            acts = struct.unpack_from(f">{count}I", body, off)
            off += 4 * count
        except struct.error as exc:
            raise FormatError("truncated META") from exc
        if off != len(body):
            raise FormatError("trailing bytes in META")
        return cls(count, tuple(acts), tuple(shape), in_scale, out_scale, bound)


# -- metering -------------------------------------------------------------------

@dataclass
class LayerRow:
    name: str
    ops: OpCounter = field(default_factory=OpCounter)
    bytes_sent: int = 0
    bytes_received: int = 0
    seconds: float = 0.0


@dataclass
class SessionStats:
    role: str
    rows: list = field(default_factory=list)

    def row(self, name):
        r = LayerRow(name)
        self.rows.append(r)
        return r

    @property
    def bytes_sent(self):
        return sum(r.bytes_sent for r in self.rows)

    @property
    def bytes_received(self):
        return sum(r.bytes_received for r in self.rows)

    @property
    def round_trips(self):
        return sum(r.ops.round_trips for r in self.rows)

    @property
    def seconds(self):
        return sum(r.seconds for r in self.rows)

    def totals(self):
        ops = OpCounter()
        for r in self.rows:
            ops = ops + r.ops
        return ops


class FramedConnection:
    """Length-prefixed frames over a byte stream, with byte metering.

    ``stream`` needs ``sendall`` and ``recv``.  If ``transcript`` is a list,
    every frame sent or received is appended as ``(direction, bytes)``.
    """

    def __init__(self, stream, stats=None, transcript=None):
        self.stream = stream
        self.stats = stats
        self.transcript = transcript
        self.seq = 0
        self._row = None

    def section(self, name):
        if self.stats is not None:
            self._row = self.stats.row(name)
        return self._row

    def send(self, tag, body=b""):
        frame = HEADER.pack(len(body), tag, self.seq) + body
        self.seq += 1
        self.stream.sendall(frame)
        self._meter(frame, "out")

    def _recv_exact(self, k):
        chunks, got = [], 0
        while got < k:
            chunk = self.stream.recv(min(k - got, 1 << 20))
            if not chunk:
                raise ProtocolAbort(AbortReason.CONNECTION, "connection closed")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def recv(self, expect=None):
        """Receive one frame; ABORT frames are raised, other tags are checked."""
        head = self._recv_exact(HEADER_BYTES)
        size, tag, seq = HEADER.unpack(head)
        if size > MAX_BODY:
            raise ProtocolAbort(AbortReason.MALFORMED, "frame too large")
        body = self._recv_exact(size)
        self._meter(head + body, "in")
        if tag == MsgType.ABORT:
            code = body[0] if len(body) == 1 else AbortReason.MALFORMED
            exc = ProtocolAbort(code, "peer aborted")
            exc.from_peer = True
            raise exc
        if seq != self.seq:
            raise ProtocolAbort(AbortReason.PROTOCOL_ORDER, "out-of-sequence frame")
        self.seq += 1
        if expect is not None and tag not in ((expect,) if isinstance(expect, int) else expect):
            raise ProtocolAbort(AbortReason.PROTOCOL_ORDER, f"unexpected {MsgType.NAMES.get(tag, tag)}")
        return tag, body

    def abort(self, code):
        try:
            self.send(MsgType.ABORT, bytes([int(code)]))
        except OSError:
            pass

    def _meter(self, frame, direction):
        if self.transcript is not None:
            self.transcript.append((direction, frame))
        if self._row is not None:
            if direction == "out":
                self._row.bytes_sent += len(frame)
            else:
                self._row.bytes_received += len(frame)


# -- configuration --------------------------------------------------------------

@dataclass
class SessionConfig:
    key_bits: int = 1024
    fusion: bool = True
    diff_kernel: bool = False
    plain_bound: int = DEFAULT_PLAIN_BOUND
    blind_bound: int = DEFAULT_BLIND_BOUND
    input_bound: int = 1 << 16
    seed: object = None
    relu: ReluConfig = field(default_factory=ReluConfig)

    def rng(self, role):
        return Rng(self.seed).child(role) if self.seed is not None else Rng(None)


def plan_layers(model, fusion=True, diff_kernel=False):
    """Group model layers into execution steps.

    Returns ``(kind, layer_indices)`` with kinds ``linear``, ``relu``,
    ``maxpool``, ``flatten``, ``relu_maxpool`` and ``conv_relu_maxpool``.
    """
    steps, i, layers = [], 0, model.layers
    while i < len(layers):
        kind = layers[i].kind
        nxt = layers[i + 1].kind if i + 1 < len(layers) else None
        nxt2 = layers[i + 2].kind if i + 2 < len(layers) else None
        if (diff_kernel and fusion and kind == "conv" and nxt == "relu" and nxt2 == "maxpool"
                and isinstance(layers[i].weights, (DenseInt, PrunedCodebook))):
            steps.append(("conv_relu_maxpool", (i, i + 1, i + 2)))
            i += 3
        elif fusion and kind == "relu" and nxt == "maxpool":
            steps.append(("relu_maxpool", (i, i + 1)))
            i += 2
        else:
            steps.append(("linear" if kind in LINEAR_KINDS else kind, (i,)))
            i += 1
    return steps


def expected_round_trips(model, fusion=True):
    """Rounds = sum of (ceil(log2 m) + 1) per fused relu+mp, 1 per bare relu."""
    total = 0
    for kind, idx in plan_layers(model, fusion):
        if kind in ("relu_maxpool", "conv_relu_maxpool"):
            total += math.ceil(math.log2(model.layers[idx[-1]].spec.window ** 2)) + 1
        elif kind == "relu":
            total += 1
        elif kind == "maxpool":
            total += math.ceil(math.log2(model.layers[idx[0]].spec.window ** 2))
    return total


# -- roles ----------------------------------------------------------------------

def _server_roundtrip(conn, pk):
    def roundtrip(cells):
        conn.send(MsgType.BLINDED_BATCH, pack_batch(cells, pk))
        _, body = conn.recv(MsgType.CLIENT_RESPONSE)
        return unpack_batch(body, pk)
    return roundtrip


def run_server(model, conn, cfg=None, input_bound=None):
    """Serve one inference over ``conn`` (a :class:`FramedConnection`)."""
    cfg = cfg or SessionConfig()
    stats = conn.stats if conn.stats is not None else SessionStats("server")
    conn.stats = stats
    rng = cfg.rng("server")
    if input_bound is None:
        input_bound = cfg.input_bound
    try:
        row = conn.section("handshake")
        t0 = time.perf_counter()
        _, body = conn.recv(MsgType.HELLO)
        if len(body) != 2:
            raise ProtocolAbort(AbortReason.MALFORMED, "bad HELLO")
        conn.send(MsgType.HELLO, struct.pack(">H", PROTOCOL_VERSION))
        if struct.unpack(">H", body)[0] != PROTOCOL_VERSION:
            raise ProtocolAbort(AbortReason.VERSION, "version mismatch")
        conn.send(MsgType.META, ModelMeta.from_model(model, input_bound).to_bytes())
        _, body = conn.recv(MsgType.PUBKEY)
        n, off = paillier._unpack_int(body, 0)
        if off != len(body) or n.bit_length() not in paillier.SUPPORTED_BITS:
            raise ProtocolAbort(AbortReason.MALFORMED, "bad PUBKEY")
        pk = paillier.PublicKey.from_n(n)
        try:
            codec = SignedCodec.for_key(pk, cfg.plain_bound, cfg.blind_bound)
        except ValueError:
            raise ProtocolAbort(AbortReason.BOUND, "key too small for the configured bounds") from None
        row.seconds = time.perf_counter() - t0

        row = conn.section("input")
        t0 = time.perf_counter()
        _, body = conn.recv(MsgType.ENC_INPUT)
        cells = unpack_batch(body, pk)
        in_count = math.prod(model.input_shape)
        if len(cells) != in_count + 1:
            raise ProtocolAbort(AbortReason.MALFORMED, "input size mismatch")
        x = EncTensor(model.input_shape, cells[1:], model.input_scale, input_bound)
        ctx = ProtocolContext(pk, OpCounter(), cells[0], rng, codec,
                              roundtrip=_server_roundtrip(conn, pk), relu_cfg=cfg.relu)
        row.seconds = time.perf_counter() - t0

        for kind, idx in plan_layers(model, cfg.fusion, cfg.diff_kernel):
            layers = [model.layers[i] for i in idx]
            row = conn.section("+".join(l.name for l in layers))
            ctx.ctr = row.ops
            t0 = time.perf_counter()
            if kind == "linear":
                x = eval_layer(layers[0], x, ctx)
            elif kind == "relu":
                x = relu(x, ctx)
            elif kind == "maxpool":
                x = maxpool(x, layers[0].spec.window, layers[0].spec.stride, ctx)
            elif kind == "relu_maxpool":
                x = fused_relu_maxpool(x, layers[1].spec.window, layers[1].spec.stride, ctx)
            elif kind == "conv_relu_maxpool":
                mp = layers[2].spec
                x = fused_conv_relu_maxpool(x, layers[0], mp.window, mp.stride, ctx)
            elif kind == "flatten":
                x = x.reshape((len(x),))
            row.seconds = time.perf_counter() - t0

        row = conn.section("result")
        conn.send(MsgType.RESULT, pack_batch(x.cells, pk))
        return stats
    except BoundOverflowError:
        conn.abort(AbortReason.BOUND)
        raise
    except ProtocolAbort as exc:
        if exc.code != AbortReason.CONNECTION and not getattr(exc, "from_peer", False):
            conn.abort(exc.code)
        raise
    except (FormatError, ShapeError):
        conn.abort(AbortReason.MALFORMED)
        raise
    except Exception:
        conn.abort(AbortReason.INTERNAL)
        raise


def run_client(x, conn, cfg=None, key=None):
    """Run one inference as the key-holding client.

    ``x`` is a :class:`PlainTensor` already at the model's input scale, or a
    real-valued array that gets quantized using the scale announced in META.
    Returns ``(logits, stats)`` with integer logits at the model output scale.
    """
    cfg = cfg or SessionConfig()
    stats = conn.stats if conn.stats is not None else SessionStats("client")
    conn.stats = stats
    rng = cfg.rng("client")
    try:
        row = conn.section("handshake")
        t0 = time.perf_counter()
        conn.send(MsgType.HELLO, struct.pack(">H", PROTOCOL_VERSION))
        _, body = conn.recv(MsgType.HELLO)
        if body != struct.pack(">H", PROTOCOL_VERSION):
            raise ProtocolAbort(AbortReason.VERSION, "version mismatch")
        _, body = conn.recv(MsgType.META)
        meta = ModelMeta.from_bytes(body)
        if key is None:
            pk, sk = paillier.keygen(cfg.key_bits, rng.child("keygen"))
        else:
            sk = key
            pk = sk.public_key
        conn.send(MsgType.PUBKEY, paillier._pack_int(pk.n))
        codec = SignedCodec.for_key(pk, cfg.plain_bound, cfg.blind_bound)
        row.seconds = time.perf_counter() - t0

        row = conn.section("input")
        t0 = time.perf_counter()
        if not isinstance(x, PlainTensor):
            x = PlainTensor.from_real(x, meta.input_scale)
        if x.scale_exp != meta.input_scale or math.prod(x.shape) != math.prod(meta.input_shape):
            raise ShapeError("input does not match the model's input shape or scale")
        if x.bound > meta.input_bound:
            raise BoundOverflowError("input exceeds the bound announced by the server")
        enc_rng = rng.child("encrypt")
        one = paillier.encrypt(1, pk, enc_rng)
        enc = encrypt_tensor(x, pk, enc_rng, codec)
        conn.send(MsgType.ENC_INPUT, pack_batch([one] + enc.cells, pk))
        row.seconds = time.perf_counter() - t0

        row = conn.section("rounds")
        t0 = time.perf_counter()
        resp_rng = rng.child("respond")
        while True:
            tag, body = conn.recv((MsgType.BLINDED_BATCH, MsgType.RESULT))
            if tag == MsgType.RESULT:
                break
            cells = unpack_batch(body, pk)
            row.ops.ciphertexts_received += len(cells)
            out = client_respond(cells, sk, resp_rng)
            conn.send(MsgType.CLIENT_RESPONSE, pack_batch(out, pk))
            row.ops.ciphertexts_sent += len(out)
            row.ops.round_trips += 1
        row.seconds = time.perf_counter() - t0

        cells = unpack_batch(body, pk)
        if meta.layer_count and len(cells) != meta.activation_counts[-1]:
            raise ProtocolAbort(AbortReason.MALFORMED, "result size mismatch")
        vals = [codec.decode(paillier.decrypt(c, sk)) for c in cells]
        return PlainTensor(vals, meta.output_scale), stats
    except ProtocolAbort as exc:
        if exc.code != AbortReason.CONNECTION and not getattr(exc, "from_peer", False):
            conn.abort(exc.code)
        raise
    except (FormatError, ShapeError):
        conn.abort(AbortReason.MALFORMED)
        raise
    except BoundOverflowError:
        conn.abort(AbortReason.BOUND)
        raise


@dataclass
class LoopbackResult:
    logits: PlainTensor
    client: SessionStats
    server: SessionStats
    transcript: list


def loopback_session(model, x, cfg=None, input_bound=None, key=None, capture=False):
    """Run server and client in one process over a socket pair."""
    cfg = cfg or SessionConfig()
    a, b = socket.socketpair()
    transcript = [] if capture else None
    server_conn = FramedConnection(a, SessionStats("server"))
    client_conn = FramedConnection(b, SessionStats("client"), transcript)
    failure = []

    def serve():
        try:
            run_server(model, server_conn, cfg, input_bound)
        except Exception as exc:  # the client sees the ABORT; keep the cause
            failure.append(exc)

    th = threading.Thread(target=serve, daemon=True)
    th.start()
    try:
        logits, cstats = run_client(x, client_conn, cfg, key)
    except ProtocolAbort as exc:
        th.join()
        if failure:
            exc.server_error = failure[0]
        raise
    finally:
        th.join()
        a.close()
        b.close()
    if failure:
        raise failure[0]
    return LoopbackResult(logits, cstats, server_conn.stats, transcript)


def serve_tcp(model, host, port, cfg=None, input_bound=None, once=True, on_ready=None):
    """Accept connections and serve each in turn (``once`` stops after one).

    ``on_ready(host, port)`` is called once the socket is listening.
    """
    with socket.create_server((host, port)) as srv:
        if on_ready is not None:
            on_ready(*srv.getsockname()[:2])
        while True:
            sock, _ = srv.accept()
            with sock:
                conn = FramedConnection(sock, SessionStats("server"))
                stats = run_server(model, conn, cfg, input_bound)
            if once:
                return stats


def connect_tcp(x, host, port, cfg=None, timeout=None):
    with socket.create_connection((host, port), timeout=timeout) as sock:
        return run_client(x, FramedConnection(sock, SessionStats("client")), cfg)
