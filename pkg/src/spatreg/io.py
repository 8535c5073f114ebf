"""File formats: raw array containers, dataset manifests, checkpoints.

An array container is a single file: a 4-byte little-endian header length,
a JSON header, then the payload as little-endian float32 in row-major
order. Checkpoints use the same layout with all parameter arrays
concatenated behind one header. Everything written here is byte-stable for
fixed inputs (no timestamps), so reruns can be diffed.
"""

import hashlib
import json
import os
import struct

import numpy as np
import torch

ARRAY_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
DATASET_FORMAT_VERSION = 1

ARRAY_KINDS = ("image", "labels", "displacement", "weights")

_AXIS_ORDER = {2: "ij", 3: "ijk"}


class CheckpointVersionError(RuntimeError):
    """Checkpoint was written by an incompatible format version."""


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(d):
    return hashlib.sha256(_canonical_json(d).encode()).hexdigest()


def _write_container(path, header, payload_bytes):
    blob = _canonical_json(header).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(payload_bytes)


def _read_container(path):
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        payload = f.read()
    return header, payload


def save_array(path, array, kind):
    """Write an image / label map / displacement / weight field container."""
    if kind not in ARRAY_KINDS:
        raise ValueError(f"save_array: kind must be one of {ARRAY_KINDS}, got {kind!r}")
    if torch.is_tensor(array):
        array = array.detach().cpu().numpy()
    array = np.asarray(array)
    if kind == "displacement":
        spatial = array.shape[1:]
        axis_order = "c" + _AXIS_ORDER[len(spatial)]
        if array.shape[0] != len(spatial):
            raise ValueError(
                f"save_array: displacement needs one component per spatial axis, "
                f"got shape {array.shape}"
            )
    else:
        spatial = array.shape
        axis_order = _AXIS_ORDER[len(spatial)]
    header = {
        "format_version": ARRAY_FORMAT_VERSION,
        "dtype": "f32",
        "shape": [int(s) for s in spatial],
        "axis_order": axis_order,
        "kind": kind,
    }
    payload = array.astype("<f4").tobytes(order="C")
    _write_container(path, header, payload)


def load_array(path):
    """Read a container; returns ``(tensor, header)``. Labels come back as int64."""
    header, payload = _read_container(path)
    if header.get("format_version") != ARRAY_FORMAT_VERSION:
        raise ValueError(
            f"load_array: unsupported format version {header.get('format_version')}"
        )
    shape = tuple(header["shape"])
    kind = header["kind"]
    count = int(np.prod(shape))
    if kind == "displacement":
        count *= len(shape)
    if len(payload) != count * 4:
        raise ValueError(
            f"load_array: payload is {len(payload)} bytes, expected {count * 4}"
        )
    array = np.frombuffer(payload, dtype="<f4").copy()
    if kind == "displacement":
        array = array.reshape((len(shape),) + shape)
    else:
        array = array.reshape(shape)
    tensor = torch.from_numpy(array)
    if kind == "labels":
        tensor = tensor.long()
    return tensor, header


def write_manifest(path, manifest, file_keys=()):
    """Write a manifest JSON after checking that every referenced file exists.

    ``file_keys`` are dotted paths or callables producing file lists; here we
    simply accept an iterable of path strings to verify.
    """
    for ref in file_keys:
        if not os.path.exists(ref):
            raise FileNotFoundError(f"manifest references missing file: {ref}")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def save_dataset(out_dir, pairs, meta, pair_seeds=None):
    """Write one container per array of each pair plus a manifest JSON."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    refs = []
    for i, pair in enumerate(pairs):
        files = {}
        for name, array, kind in (
            ("fixed", pair.fixed, "image"),
            ("moving", pair.moving, "image"),
            ("fixed_labels", pair.fixed_labels, "labels"),
            ("moving_labels", pair.moving_labels, "labels"),
            ("true_field", pair.true_field, "displacement"),
        ):
            fname = f"pair{i:04d}_{name}.arr"
            save_array(os.path.join(out_dir, fname), array, kind)
            files[name] = fname
            refs.append(os.path.join(out_dir, fname))
        entry = {"index": i, "files": files}
        if pair_seeds is not None:
            entry["seed"] = int(pair_seeds[i])
        entries.append(entry)
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "pairs": entries,
        **meta,
    }
    path = os.path.join(out_dir, "manifest.json")
    write_manifest(path, manifest, file_keys=refs)
    return path


def load_dataset(manifest_path):
    """Read a dataset back; returns ``(pairs, manifest)``."""
    from .phantoms import PhantomPair  # local import to keep io free of scipy

    with open(manifest_path) as f:
        manifest = json.load(f)
    base = os.path.dirname(manifest_path)
    pairs = []
    for entry in manifest["pairs"]:
        arrays = {
            name: load_array(os.path.join(base, fname))[0]
            for name, fname in entry["files"].items()
        }
        pairs.append(PhantomPair(**arrays))
    return pairs, manifest


def save_checkpoint(path, model, extra=None):
    """Versioned container: run config plus every parameter/buffer array."""
    state = model.state_dict()
    arrays = []
    payload = bytearray()
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        arrays.append({"name": name, "shape": list(arr.shape)})
        payload.extend(arr.tobytes(order="C"))
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.config.to_dict(),
        "config_hash": model.config.config_hash(),
        "arrays": arrays,
    }
    if extra:
        header["extra"] = extra
    _write_container(path, header, bytes(payload))


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; returns ``(model, header)``."""
    from .network import RegistrationPyramid, RunConfig

    header, payload = _read_container(path)
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {header.get('format_version')} does not "
            f"match supported version {CHECKPOINT_FORMAT_VERSION}"
        )
    config = RunConfig.from_dict(header["config"])
    model = RegistrationPyramid(config)
    state = {}
    offset = 0
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        chunk = payload[offset:offset + count * 4]
        offset += count * 4
        arr = np.frombuffer(chunk, dtype="<f4").copy().reshape(spec["shape"])
        state[spec["name"]] = torch.from_numpy(arr)
    if offset != len(payload):
        raise ValueError("load_checkpoint: payload size mismatch")
    model.load_state_dict(state)
    return model, header


def save_curve_csv(path, curve):
    with open(path, "w") as f:
        f.write("iteration,level,total,similarity,regularizer\n")
        for row in curve:
            f.write(
                f"{row['iteration']},{row['level']},{row['total']:.8f},"
                f"{row['similarity']:.8f},{row['regularizer']:.8f}\n"
            )


def load_curve_csv(path):
    curve = []
    with open(path) as f:
        next(f)
        for line in f:
            it, level, total, sim, reg = line.strip().split(",")
            curve.append({
                "iteration": int(it),
                "level": int(level),
                "total": float(total),
                "similarity": float(sim),
                "regularizer": float(reg),
            })
    return curve
