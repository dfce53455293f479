"""Convert a pretrained VGG-19 checkpoint into a .dtpw weight file.

Reads a torch state_dict (torchvision layout: ``features.N.weight``),
validates the 16 conv layers against the canonical VGG-19 shapes, and
writes them as ``conv{block}_{index}`` tensors in the .dtpw container,
little-endian, float32.  Beside the weight file it emits a manifest with
the name mapping and a golden-probe record: the bundled 64x64 probe
image plus the relu3_4 activation statistics this exporter computed from
the exported tensors.  A consumer that loads the file and encodes the
probe can check its own relu3_4 statistics against the manifest.

The only coupling to the consumer is the .dtpw byte format and the
tensor naming convention; nothing is imported from it.
"""

import argparse
import hashlib
import importlib.resources
import json
import struct
import sys

import numpy as np

__all__ = [
    "ExportError",
    "VGG19_CONVS",
    "export",
    "main",
    "write_synthetic_checkpoint",
]


class ExportError(Exception):
    """Checkpoint does not contain a usable VGG-19 feature stack."""


# (feature index, dtp name, out channels, in channels); torchvision's
# vgg19().features indexing, conv1_1 through conv5_4, all 3x3
_PLAN = [
    (0, "conv1_1", 64, 3),
    (2, "conv1_2", 64, 64),
    (5, "conv2_1", 128, 64),
    (7, "conv2_2", 128, 128),
    (10, "conv3_1", 256, 128),
    (12, "conv3_2", 256, 256),
    (14, "conv3_3", 256, 256),
    (16, "conv3_4", 256, 256),
    (19, "conv4_1", 512, 256),
    (21, "conv4_2", 512, 512),
    (23, "conv4_3", 512, 512),
    (25, "conv4_4", 512, 512),
    (28, "conv5_1", 512, 512),
    (30, "conv5_2", 512, 512),
    (32, "conv5_3", 512, 512),
    (34, "conv5_4", 512, 512),
]

VGG19_CONVS = tuple(name for _, name, _, _ in _PLAN)

# pool after these convs on the way to relu3_4 (probe forward pass)
_POOL_AFTER = {"conv1_2", "conv2_2"}
_PROBE_TAP = "conv3_4"

_NORM_MEAN = (0.485, 0.456, 0.406)
_NORM_STD = (0.229, 0.224, 0.225)

_MAGIC = b"DTPW"
_VERSION = 1
_DTYPE_F32 = 0


def _normalize_state_dict(raw):
    """Unwrap common checkpoint envelopes and prefixes."""
    sd = raw
    if isinstance(sd, dict) and "state_dict" in sd and isinstance(sd["state_dict"], dict):
        sd = sd["state_dict"]
    if not isinstance(sd, dict):
        raise ExportError(
            f"checkpoint is not a state_dict mapping (got {type(raw).__name__})"
        )
    return {
        (k[len("module."):] if k.startswith("module.") else k): v
        for k, v in sd.items()
    }


def _collect_tensors(sd):
    """Pull the 16 conv layers out, validating names and shapes.

    Returns (ordered name mapping native -> dtp, ordered list of
    (dtp_name, float32 ndarray) pairs, weight then bias per conv).
    """
    mapping = {}
    tensors = []
    for idx, name, out_ch, in_ch in _PLAN:
        for part, want in (
            ("weight", (out_ch, in_ch, 3, 3)),
            ("bias", (out_ch,)),
        ):
            native = f"features.{idx}.{part}"
            if native not in sd:
                raise ExportError(
                    f"checkpoint is missing {native} ({name}.{part})"
                )
            arr = np.asarray(sd[native].detach().cpu().numpy(), dtype=np.float32)
            if arr.shape != want:
                raise ExportError(
                    f"{native} ({name}.{part}) has shape {tuple(arr.shape)}, "
                    f"expected {want}"
                )
            mapping[native] = f"{name}.{part}"
            tensors.append((f"{name}.{part}", arr))
    return mapping, tensors


def _write_dtpw(tensors, path):
    out = [_MAGIC, struct.pack("<I", _VERSION), struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB", _DTYPE_F32, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = b"".join(out)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def _probe_bytes():
    return importlib.resources.files(__package__).joinpath("probe.png").read_bytes()


def _probe_array(png_bytes):
    import io

    from PIL import Image

    with Image.open(io.BytesIO(png_bytes)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def _probe_statistics(tensors, probe):
    """Forward the probe through conv1_1..conv3_4 with torch and return
    float64 mean/std of the relu3_4 activation."""
    import torch
    import torch.nn.functional as F

    params = dict(tensors)
    x = torch.from_numpy(probe.transpose(2, 0, 1)).unsqueeze(0)
    mean = torch.tensor(_NORM_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(_NORM_STD).view(1, 3, 1, 1)
    x = (x - mean) / std
    with torch.no_grad():
        for _, name, _, _ in _PLAN:
            w = torch.from_numpy(params[f"{name}.weight"])
            b = torch.from_numpy(params[f"{name}.bias"])
            x = F.relu(F.conv2d(x, w, b, padding=1))
            if name == _PROBE_TAP:
                break
            if name in _POOL_AFTER:
                x = F.max_pool2d(x, 2)
    feat = x.double()
    return float(feat.mean()), float(feat.std(unbiased=False))


def _sha256(data):
    return hashlib.sha256(data).hexdigest()


def export(state_dict, out_path, source=None):
    """Write out_path (.dtpw), the manifest, and the probe image.

    ``state_dict`` maps native tensor names to torch tensors; ``source``
    is an identifier recorded in the manifest.  Returns the manifest
    dict.  Raises ExportError on missing layers or shape mismatches.
    """
    sd = _normalize_state_dict(state_dict)
    mapping, tensors = _collect_tensors(sd)
    blob = _write_dtpw(tensors, out_path)

    stem = out_path[: -len(".dtpw")] if out_path.endswith(".dtpw") else out_path
    probe_png = _probe_bytes()
    probe_path = stem + ".probe.png"
    with open(probe_path, "wb") as fh:
        fh.write(probe_png)

    p_mean, p_std = _probe_statistics(tensors, _probe_array(probe_png))
    manifest = {
        "format": "dtpw",
        "version": _VERSION,
        "source": source or {},
        "weights": {"file": out_path.rsplit("/", 1)[-1], "sha256": _sha256(blob), "tensors": len(tensors)},
        "mapping": mapping,
        "probe": {
            "file": probe_path.rsplit("/", 1)[-1],
            "sha256": _sha256(probe_png),
            "size": [64, 64],
            "normalization": {"mean": list(_NORM_MEAN), "std": list(_NORM_STD)},
            "relu3_4": {"mean": p_mean, "std": p_std},
        },
    }
    manifest_path = stem + ".manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def write_synthetic_checkpoint(path, seed=0):
    """Write a torch checkpoint with the VGG-19 feature layout but random
    weights.  Stands in for the real pretrained file where downloads are
    unavailable (tests, offline machines)."""
    import torch

    gen = torch.Generator().manual_seed(seed)
    sd = {}
    for idx, _, out_ch, in_ch in _PLAN:
        scale = float(np.sqrt(2.0 / (in_ch * 9)))
        sd[f"features.{idx}.weight"] = (
            torch.randn((out_ch, in_ch, 3, 3), generator=gen) * scale
        )
        sd[f"features.{idx}.bias"] = torch.zeros(out_ch)
    # consumers must ignore non-feature entries
    sd["classifier.0.weight"] = torch.zeros(8, 8)
    torch.save(sd, path)
    return path


def _load_checkpoint(path):
    import torch

    try:
        return torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise ExportError(f"checkpoint not found: {path}")
    except Exception as exc:
        raise ExportError(f"cannot read checkpoint {path}: {exc}")


def _download_checkpoint():
    try:
        from torchvision.models import VGG19_Weights

        return (
            VGG19_Weights.IMAGENET1K_V1.get_state_dict(progress=False),
            {"checkpoint": "torchvision:vgg19/IMAGENET1K_V1"},
        )
    except Exception as exc:
        raise ExportError(
            "fetching the torchvision VGG-19 checkpoint failed "
            f"({exc}); pass --checkpoint <path> instead"
        )


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="export_vgg19",
        description="Export VGG-19 conv weights to a .dtpw file with a "
        "golden-probe manifest.",
    )
    parser.add_argument("--out", required=True, help="output .dtpw path")
    parser.add_argument(
        "--checkpoint",
        help="torch checkpoint to read (default: download via torchvision)",
    )
    args = parser.parse_args(argv)

    try:
        if args.checkpoint:
            raw = _load_checkpoint(args.checkpoint)
            with open(args.checkpoint, "rb") as fh:
                digest = _sha256(fh.read())
            source = {
                "checkpoint": args.checkpoint.rsplit("/", 1)[-1],
                "sha256": digest,
            }
        else:
            raw, source = _download_checkpoint()
        manifest = export(raw, args.out, source)
    except ExportError as exc:
        print(f"export_vgg19: {exc}", file=sys.stderr)
        return 1
    probe = manifest["probe"]["relu3_4"]
    print(
        f"wrote {args.out}: {manifest['weights']['tensors']} tensors, "
        f"probe relu3_4 mean {probe['mean']:.6g} std {probe['std']:.6g}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
