"""Portable binary container for a network and its neuron ledger.

Layout (little-endian)::

    b"SPCLNET\\0"  magic
    u16            format version
    u32            header length
    header         UTF-8 JSON: input shape, layer specs, output map, ledger,
                   and the (task, layer, count) order of the edge lists
    edge lists     per entry: int32 sources, int32 targets, float64 weights
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .allocation import NeuronLedger
from .exceptions import ArtifactNotFoundError, FormatError, LengthError
from .network import NetworkState

MAGIC = b"SPCLNET\x00"
VERSION = 1


def save_network(path, network: NetworkState, ledger: NeuronLedger | None = None):
    entries = []
    blobs = []
    for task, sets in sorted(network.edge_sets().items()):
        for es in sets:
            entries.append({"task": int(task), "layer": es.layer, "count": len(es)})
            blobs.append(es.source.astype("<i4").tobytes())
            blobs.append(es.target.astype("<i4").tobytes())
            blobs.append(np.ascontiguousarray(es.weights, dtype="<f8").tobytes())
    header = {
        "input_shape": list(network.input_shape),
        "layers": [l.to_dict() for l in network.layers],
        "output_map": [[int(c), int(u)] for c, u in network.output_map.items()],
        "edges": entries,
        "ledger": ledger.to_dict() if ledger is not None else None,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<HI", VERSION, len(hb)) + hb)
        for b in blobs:
            f.write(b)


def load_network(path):
    """Return ``(network, ledger)``; ``ledger`` is ``None`` when none was saved."""
    p = Path(path)
    if not p.exists():
        raise ArtifactNotFoundError(f"snapshot {p} not found")
    raw = p.read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{p} is not a network snapshot")
    if len(raw) < 14:
        raise LengthError("snapshot header truncated")
    version, hlen = struct.unpack("<HI", raw[8:14])
    if version != VERSION:
        raise FormatError(f"unsupported snapshot version {version}")
    header = json.loads(raw[14 : 14 + hlen])
    net = NetworkState(header["input_shape"], header["layers"])
    net.output_map = {c: u for c, u in header["output_map"]}
    pos = 14 + hlen
    for e in header["edges"]:
        n, blk = e["count"], net.block_shape(e["layer"])
        size = 8 * n + 8 * n * int(np.prod(blk))
        if pos + size > len(raw):
            raise LengthError("snapshot edge payload truncated")
        src = np.frombuffer(raw, "<i4", n, pos)
        tgt = np.frombuffer(raw, "<i4", n, pos + 4 * n)
        w = np.frombuffer(raw, "<f8", n * int(np.prod(blk)), pos + 8 * n).reshape((n,) + blk)
        net.add_edges(e["layer"], src, tgt, e["task"], w)
        pos += size
    if pos != len(raw):
        raise LengthError(f"{len(raw) - pos} trailing bytes in snapshot")
    ledger = NeuronLedger.from_dict(header["ledger"]) if header["ledger"] else None
    return net, ledger
