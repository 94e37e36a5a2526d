"""Server-side orchestration: round loop, uniform client selection,
sample-weighted aggregation of payloads, and payload accounting.

Clients are in-process actors, but every tensor crossing the client/server
boundary passes through serialize_payload/deserialize_payload so the privacy
scan over transmitted bytes is meaningful.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .client import Client, ClientConfig
from .lbsn import bn_tensors, finalize_global_bn, set_bn_tensors, strip_bn

MAGIC = b"FRPL"


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class FederationConfig:
    clients: int
    rounds: int
    selected_per_round: int
    seed: int = 0
    failure_policy: str = "abort"   # abort | drop

    def __post_init__(self):
        if not (1 <= self.selected_per_round <= self.clients):
            raise ValueError(f"need 1 <= m <= K, got m={self.selected_per_round} "
                             f"K={self.clients}")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.failure_policy not in ("abort", "drop"):
            raise ValueError(f"unknown failure policy {self.failure_policy!r}")


@dataclass
class RoundReport:
    round_index: int
    selected: list[int]
    client_samples: dict[int, int]
    total_samples: int
    bytes_down: int
    bytes_up: int
    wall_time: float

    def to_json(self) -> dict:
        return {"round": self.round_index, "selected": self.selected,
                "n_k": {str(k): v for k, v in self.client_samples.items()},
                "N_r": self.total_samples, "bytes_down": self.bytes_down,
                "bytes_up": self.bytes_up, "wall_time": self.wall_time}


# ---------------------------------------------------------------------------
# wire format


def serialize_payload(payload: dict[str, np.ndarray]) -> bytes:
    """Header (names, shapes) + concatenated little-endian float64 arrays."""
    names = sorted(payload)
    header = json.dumps([{"name": n, "shape": list(payload[n].shape)}
                         for n in names]).encode()
    chunks = [MAGIC, struct.pack("<I", len(header)), header]
    for n in names:
        chunks.append(payload[n].astype("<f8", copy=False).tobytes())
    return b"".join(chunks)


def deserialize_payload(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ValueError("bad payload magic")
    hlen = struct.unpack("<I", blob[4:8])[0]
    header = json.loads(blob[8:8 + hlen].decode())
    off = 8 + hlen
    out = {}
    for entry in header:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        out[entry["name"]] = np.frombuffer(
            blob, dtype="<f8", count=n, offset=off).reshape(entry["shape"]).copy()
        off += n * 8
    return out


def payload_tensor_names(blob: bytes) -> list[str]:
    """Structural scan: tensor names carried by a serialized payload."""
    hlen = struct.unpack("<I", blob[4:8])[0]
    return [e["name"] for e in json.loads(blob[8:8 + hlen].decode())]


# ---------------------------------------------------------------------------
# selection and aggregation


def select_clients(rng: np.random.Generator, K: int, m: int) -> list[int]:
    """Uniform sample of m distinct clients."""
    if not (1 <= m <= K):
        raise ValueError(f"need 1 <= m <= K, got m={m} K={K}")
    return sorted(int(i) for i in rng.choice(K, size=m, replace=False))


def aggregate(payloads: list[tuple[dict[str, np.ndarray], int]],
              allow_bn: bool = False) -> dict[str, np.ndarray]:
    """Tensor-wise weighted mean, weights n_k / sum(n_k)."""
    if not payloads:
        raise AggregationError("nothing to aggregate")
    names = sorted(payloads[0][0])
    if not allow_bn:
        bad = [n for n in names if n.split(".")[0].startswith("bn")]
        if bad:
            raise AggregationError(f"normalization-local tensors in payload: {bad}")
    total = float(sum(n for _, n in payloads))
    # canonical accumulation order makes the result bit-identical under any
    # permutation of the client list
    def key(item):
        p, n = item
        return (n, ) + tuple(p[name].tobytes() for name in names)
    ordered = sorted(payloads, key=key)
    out: dict[str, np.ndarray] = {}
    for name in names:
        shape = payloads[0][0][name].shape
        acc = np.zeros(shape)
        for p, n in ordered:
            if sorted(p) != names:
                raise AggregationError("payload name sets differ")
            if p[name].shape != shape:
                raise AggregationError(f"shape mismatch for {name}")
            acc += (n / total) * p[name]
        out[name] = acc
    return out


# ---------------------------------------------------------------------------
# server loop


def make_clients(datasets, model_cfg: M.ModelConfig, client_cfg: ClientConfig,
                 seed: int, lbsn: bool = True) -> list[Client]:
    """datasets: list of (x, y) per client."""
    return [Client(k, x, y, model_cfg, client_cfg, init_seed=seed,
                   shuffle_seed=seed, lbsn=lbsn)
            for k, (x, y) in enumerate(datasets)]


@dataclass
class FederationResult:
    final_model: M.ParameterSet
    reports: list[RoundReport]
    payload_log: list[bytes] = field(repr=False, default_factory=list)


def run_federation(fed_cfg: FederationConfig, model_cfg: M.ModelConfig,
                   datasets, client_cfg: ClientConfig, lbsn: bool = True,
                   clients: list[Client] | None = None,
                   keep_payload_bytes: bool = False) -> FederationResult:
    """Run the full round loop and assemble the final test model."""
    if clients is None:
        clients = make_clients(datasets, model_cfg, client_cfg, fed_cfg.seed, lbsn)
    if len(clients) != fed_cfg.clients:
        raise ValueError(f"expected {fed_cfg.clients} clients, got {len(clients)}")

    init = M.build(model_cfg, seed=fed_cfg.seed, running_stats=not lbsn)
    if lbsn:
        global_payload = strip_bn(init)
    else:
        global_payload = {n: v.copy() for n, v in init.params.items()}
        global_payload.update({n: v.copy() for n, v in init.buffers.items()})

    sel_rng = np.random.default_rng(np.random.SeedSequence([fed_cfg.seed, 0xC117]))
    reports: list[RoundReport] = []
    payload_log: list[bytes] = []

    def send(payload):
        blob = serialize_payload(payload)
        if keep_payload_bytes:
            payload_log.append(blob)
        return blob

    for r in range(1, fed_cfg.rounds + 1):
        t0 = time.perf_counter()
        selected = select_clients(sel_rng, fed_cfg.clients, fed_cfg.selected_per_round)
        down = send(global_payload)
        bytes_down = len(down) * len(selected)
        updates: list[tuple[dict[str, np.ndarray], int]] = []
        bytes_up = 0
        failed: list[int] = []
        for k in selected:
            try:
                result = clients[k].update(deserialize_payload(down))
            except Exception:
                if fed_cfg.failure_policy == "abort":
                    raise
                failed.append(k)
                continue
            up = send(result)
            bytes_up += len(up)
            updates.append((deserialize_payload(up), clients[k].n_samples))
        if not updates:
            raise AggregationError(f"round {r}: every selected client failed")
        global_payload = aggregate(updates, allow_bn=not lbsn)
        survivors = [k for k in selected if k not in failed]
        reports.append(RoundReport(
            round_index=r, selected=selected,
            client_samples={k: clients[k].n_samples for k in survivors},
            total_samples=sum(clients[k].n_samples for k in survivors),
            bytes_down=bytes_down, bytes_up=bytes_up,
            wall_time=time.perf_counter() - t0))

    final = M.build(model_cfg, seed=fed_cfg.seed, running_stats=not lbsn)
    if lbsn:
        final = strip_and_merge_final(final, global_payload, clients)
    else:
        for n, v in global_payload.items():
            if n in final.params:
                final.params[n] = v.copy()
            else:
                final.buffers[n] = v.copy()
    return FederationResult(final, reports, payload_log)


def strip_and_merge_final(final: M.ParameterSet, global_payload, clients
                          ) -> M.ParameterSet:
    """Complete test model: aggregated payload + sample-weighted scale/shift."""
    from .lbsn import merge_bn
    merge_bn(global_payload, final)
    global_bn = finalize_global_bn([(bn_tensors(c.ps), c.n_samples)
                                    for c in clients])
    set_bn_tensors(final, global_bn)
    return final
