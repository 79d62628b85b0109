"""On-disk formats: checkpoints, embedding files, training logs and metric tables.

Binary payloads are little-endian float32. JSON headers are written with
sorted keys so identical inputs give identical bytes.
"""

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError

CHECKPOINT_MAGIC = b"pabnet-v1\n"
EMBEDDING_MAGIC = b"pab-emb-v1\n"
TRAINLOG_HEADER = "#pab-trainlog-v1"
METRICS_HEADER = "#pab-metrics-v1"


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# checkpoint


def save_checkpoint(path, params, config, trainable=(), meta=None):
    """Write named arrays plus a manifest echoing ``config``.

    ``params`` maps names to tensors/arrays; ``trainable`` lists the names the
    trainer was allowed to update.
    """
    trainable = set(trainable)
    entries, blobs, offset = [], [], 0
    for name, value in params.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        if not np.isfinite(arr).all():
            raise FormatError(f"parameter {name} has non-finite values")
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "float32-le",
            "offset": offset,
            "nbytes": len(data),
            "trainable": name in trainable,
        })
        blobs.append(data)
        offset += len(data)
    header = _dumps({
        "format": CHECKPOINT_MAGIC.decode().strip(),
        "config": config,
        "params": entries,
        "meta": meta or {},
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for data in blobs:
            fh.write(data)


def load_checkpoint(path):
    """Returns ``(header, OrderedDict[name -> float32 ndarray])``."""
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path}: not a pabnet-v1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    if len(raw) < pos + 8:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    try:
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt manifest") from exc
    body = raw[pos + hlen:]
    params = OrderedDict()
    for e in header["params"]:
        chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
        expected = int(np.prod(e["shape"], dtype=np.int64)) * 4
        if len(chunk) != e["nbytes"] or e["nbytes"] != expected:
            raise FormatError(f"{path}: parameter {e['name']} is truncated or mis-sized")
        params[e["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(e["shape"]).astype(np.float32)
    return header, params


def assign_parameters(module_params, arrays, prefix=""):
    """Copy arrays into live tensors, checking names and shapes."""
    for name, tensor in module_params.items():
        key = prefix + name
        if key not in arrays:
            raise FormatError(f"checkpoint lacks parameter {key}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise FormatError(f"{key}: checkpoint shape {arr.shape} != model shape {tuple(tensor.shape)}")
        with torch.no_grad():
            tensor.copy_(torch.as_tensor(arr, dtype=tensor.dtype))


# ---------------------------------------------------------------------------
# embedding file


def save_embeddings(path, embeddings, records, metric="cosine", extra=None):
    emb = np.ascontiguousarray(embeddings, dtype="<f4")
    if emb.ndim != 2 or emb.shape[0] != len(records):
        raise FormatError("embedding array must be (N, D) aligned with the records")
    header = {
        "format": EMBEDDING_MAGIC.decode().strip(),
        "dim": int(emb.shape[1]),
        "count": int(emb.shape[0]),
        "metric": metric,
    }
    header.update(extra or {})
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(_dumps(header).encode("utf-8") + b"\n")
        for row, rec in zip(emb, records):
            for text in (rec.image_path, rec.identity):
                data = text.encode("utf-8")
                fh.write(struct.pack("<H", len(data)))
                fh.write(data)
            fh.write(struct.pack("<f", rec.yaw_degrees))
            fh.write(row.tobytes())


def load_embeddings(path):
    """Returns ``(header, samples, embeddings)``.

    ``samples`` is a list of ``(sample_id, identity, yaw)`` tuples.
    """
    raw = Path(path).read_bytes()
    if not raw.startswith(EMBEDDING_MAGIC):
        raise FormatError(f"{path}: not a pab-emb-v1 file")
    pos = len(EMBEDDING_MAGIC)
    end = raw.find(b"\n", pos)
    if end < 0:
        raise FormatError(f"{path}: missing header line")
    try:
        header = json.loads(raw[pos:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    pos = end + 1
    dim, count = int(header["dim"]), int(header["count"])
    samples = []
    emb = np.zeros((count, dim), dtype=np.float32)
    try:
        for i in range(count):
            fields = []
            for _ in range(2):
                (n,) = struct.unpack_from("<H", raw, pos)
                pos += 2
                fields.append(raw[pos:pos + n].decode("utf-8"))
                pos += n
            (yaw,) = struct.unpack_from("<f", raw, pos)
            pos += 4
            vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=pos)
            pos += 4 * dim
            emb[i] = vec
            samples.append((fields[0], fields[1], float(yaw)))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: record {len(samples)} is truncated") from exc
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes beyond {count} records")
    return header, samples, emb


# ---------------------------------------------------------------------------
# train log


def write_trainlog(path, log):
    lines = [TRAINLOG_HEADER, "#config\t" + _dumps(log.config), f"#seed\t{log.seed}"]
    lines += ["#epoch\t" + _dumps(e) for e in log.epochs]
    lines.append("step\tloss")
    lines += [f"{i + 1}\t{v!r}" for i, v in enumerate(log.losses)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_trainlog(path):
    """Returns ``(config, epochs, losses)``."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != TRAINLOG_HEADER:
        raise FormatError(f"{path}: missing {TRAINLOG_HEADER} header")
    config, epochs, losses = None, [], []
    for line in lines[1:]:
        if line.startswith("#config\t"):
            config = json.loads(line.split("\t", 1)[1])
        elif line.startswith("#epoch\t"):
            epochs.append(json.loads(line.split("\t", 1)[1]))
        elif line.startswith("#") or line == "step\tloss" or not line:
            continue
        else:
            losses.append(float(line.split("\t")[1]))
    return config, epochs, losses


# ---------------------------------------------------------------------------
# metric tables


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table(path, name, columns, rows, config=None):
    lines = [METRICS_HEADER, f"#table\t{name}"]
    if config is not None:
        lines.append("#config\t" + _dumps(config))
    lines.append("\t".join(columns))
    lines += ["\t".join(_cell(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_table(path):
    """Returns ``(name, columns, rows)`` with cells as strings."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise FormatError(f"{path}: missing {METRICS_HEADER} header")
    name, body = None, []
    for line in lines[1:]:
        if line.startswith("#table\t"):
            name = line.split("\t", 1)[1]
        elif not line.startswith("#"):
            body.append(line.split("\t"))
    if not body:
        raise FormatError(f"{path}: no column header")
    return name, body[0], body[1:]
