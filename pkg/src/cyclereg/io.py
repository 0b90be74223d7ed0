"""On-disk formats: NIfTI-1 volumes and fields, a raw sidecar format for fast
intermediate storage, flat named-tensor checkpoints, and dataset manifests.

NIfTI support is a minimal self-contained codec (single-file ``.nii`` /
``.nii.gz``, little- or big-endian, ``scl_slope``/``scl_inter`` honoured on
read). Arrays are kept in ``(D, H, W)`` order in memory; on disk the fastest
NIfTI axis ``i`` corresponds to ``W``, so ``pixdim`` is stored reversed.
Vector fields are written 4D with the vector dimension last (NIfTI ``t``).
"""

from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, GridError
from .grid import DisplacementField, LabelVolume, Volume

_NIFTI_DTYPES = {
    2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64,
    256: np.int8, 512: np.uint16, 768: np.uint32, 1024: np.int64,
}
_HDR_SIZE = 352  # 348-byte header + 4-byte extension flag


def _gzip_bytes(payload: bytes) -> bytes:
    import io as _io

    buf = _io.BytesIO()
    # mtime=0 keeps output bytes deterministic across runs
    with gzip.GzipFile(fileobj=buf, mode="wb", mtime=0) as fh:
        fh.write(payload)
    return buf.getvalue()


def _read_maybe_gzip(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def _nifti_header(shape_dhw, spacing, datatype: int, bitpix: int, ndim: int,
                  vec: int = 1, descrip: bytes = b"") -> bytes:
    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, 348)
    d, h, w = shape_dhw
    dims = [ndim, w, h, d, vec, 1, 1, 1]
    struct.pack_into("<8h", hdr, 40, *dims)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, bitpix)
    sx, sy, sz = spacing[2], spacing[1], spacing[0]
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 1.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(_HDR_SIZE))   # vox_offset
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)          # scl_slope, scl_inter
    hdr[123] = 2                                         # xyzt_units: mm
    hdr[148:148 + min(79, len(descrip))] = descrip[:79]
    struct.pack_into("<h", hdr, 254, 1)                  # sform_code
    struct.pack_into("<4f", hdr, 280, sx, 0, 0, 0)
    struct.pack_into("<4f", hdr, 296, 0, sy, 0, 0)
    struct.pack_into("<4f", hdr, 312, 0, 0, sz, 0)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def _write_nifti(path: Path, array: np.ndarray, spacing, descrip: bytes = b"") -> None:
    if array.ndim == 3:
        ndim, vec, shape = 3, 1, array.shape
    elif array.ndim == 4:
        # in-memory (3, d, h, w); on disk the vector axis is the NIfTI t axis
        ndim, vec, shape = 4, array.shape[0], array.shape[1:]
    else:
        raise DataError(f"cannot write array of ndim {array.ndim} as NIfTI")
    if array.dtype == np.float32:
        datatype, bitpix = 16, 32
    elif array.dtype == np.int16:
        datatype, bitpix = 4, 16
    elif array.dtype == np.float64:
        datatype, bitpix = 64, 64
    else:
        raise DataError(f"unsupported NIfTI dtype {array.dtype}")
    payload = _nifti_header(shape, spacing, datatype, bitpix, ndim, vec, descrip)
    payload += array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.name.endswith(".gz"):
        path.write_bytes(_gzip_bytes(payload))
    else:
        path.write_bytes(payload)


def _parse_nifti(buf: bytes, path: Path):
    if len(buf) < _HDR_SIZE:
        raise DataError(f"{path}: truncated NIfTI header")
    (sizeof_hdr,) = struct.unpack_from("<i", buf, 0)
    swapped = False
    if sizeof_hdr != 348:
        (sizeof_hdr,) = struct.unpack_from(">i", buf, 0)
        if sizeof_hdr != 348:
            raise DataError(f"{path}: not a NIfTI-1 file")
        swapped = True
    end = ">" if swapped else "<"
    magic = buf[344:348]
    if magic[:3] not in (b"n+1", b"ni1"):
        raise DataError(f"{path}: bad NIfTI magic {magic!r}")
    if magic[:3] == b"ni1":
        raise DataError(f"{path}: two-file NIfTI (.hdr/.img) is not supported")
    dims = struct.unpack_from(f"{end}8h", buf, 40)
    ndim = dims[0]
    if ndim not in (3, 4):
        raise DataError(f"{path}: expected 3D or 4D NIfTI, got ndim={ndim}")
    (datatype,) = struct.unpack_from(f"{end}h", buf, 70)
    pixdim = struct.unpack_from(f"{end}8f", buf, 76)
    (vox_offset,) = struct.unpack_from(f"{end}f", buf, 108)
    slope, inter = struct.unpack_from(f"{end}ff", buf, 112)
    descrip = buf[148:228].split(b"\x00", 1)[0].decode("latin-1", "replace")
    np_dtype = _NIFTI_DTYPES.get(datatype)
    if np_dtype is None:
        raise DataError(f"{path}: unsupported NIfTI datatype code {datatype}")
    shape_file = [dims[i] for i in range(1, ndim + 1)]  # (i, j, k[, t])
    count = int(np.prod(shape_file))
    dtype = np.dtype(np_dtype).newbyteorder(end)
    start = int(vox_offset)
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=start)
    if data.size != count:
        raise DataError(f"{path}: truncated NIfTI data")
    data = data.reshape(shape_file[::-1])  # C order: slowest axis first
    if slope not in (0.0, 1.0) or inter != 0.0:
        eff_slope = slope if slope != 0.0 else 1.0
        data = data.astype(np.float32) * eff_slope + inter
    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    grid_scale = 1
    for token in descrip.replace(";", " ").split():
        if token.startswith("grid_scale="):
            grid_scale = int(token.split("=", 1)[1])
    return np.ascontiguousarray(data), spacing, grid_scale


# ---------------------------------------------------------------------------
# raw sidecar format (.rgf): 44-byte header + little-endian payload
# ---------------------------------------------------------------------------

_RGF_MAGIC = b"RGF1"
_RGF_HEADER = struct.Struct("<4sBBH3I3d")
_RGF_KINDS = {"volume": 0, "label": 1, "field": 2}
_RGF_DTYPES = {0: np.float32, 1: np.int16}


def _write_rgf(path: Path, array: np.ndarray, kind: str, spacing, grid_scale: int) -> None:
    if array.dtype == np.float32:
        dcode = 0
    elif array.dtype == np.int16:
        dcode = 1
    else:
        raise DataError(f"unsupported rgf dtype {array.dtype}")
    shape = array.shape[1:] if kind == "field" else array.shape
    header = _RGF_HEADER.pack(_RGF_MAGIC, _RGF_KINDS[kind], dcode, grid_scale,
                              *[int(n) for n in shape], *[float(s) for s in spacing])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + array.astype(array.dtype.newbyteorder("<"), copy=False)
                     .tobytes(order="C"))


def _read_rgf(path: Path):
    buf = Path(path).read_bytes()
    if len(buf) < _RGF_HEADER.size or buf[:4] != _RGF_MAGIC:
        raise DataError(f"{path}: not a raw grid file")
    magic, kind_code, dcode, grid_scale, d, h, w, s0, s1, s2 = _RGF_HEADER.unpack_from(buf)
    dtype = np.dtype(_RGF_DTYPES[dcode]).newbyteorder("<")
    kind = {v: k for k, v in _RGF_KINDS.items()}[kind_code]
    shape = (3, d, h, w) if kind == "field" else (d, h, w)
    count = int(np.prod(shape))
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=_RGF_HEADER.size)
    if data.size != count:
        raise DataError(f"{path}: truncated payload")
    return data.reshape(shape).copy(), kind, (s0, s1, s2), int(grid_scale)


# ---------------------------------------------------------------------------
# public volume / field I/O (dispatch on extension)
# ---------------------------------------------------------------------------

def _is_rgf(path: Path) -> bool:
    return Path(path).suffix == ".rgf"


def save_volume(path, vol) -> None:
    path = Path(path)
    if isinstance(vol, LabelVolume):
        arr = vol.data.cpu().numpy().astype(np.int16)
        if _is_rgf(path):
            _write_rgf(path, arr, "label", vol.spacing, 1)
        else:
            _write_nifti(path, arr, vol.spacing)
    elif isinstance(vol, Volume):
        arr = vol.data.detach().cpu().numpy().astype(np.float32)
        if _is_rgf(path):
            _write_rgf(path, arr, "volume", vol.spacing, 1)
        else:
            _write_nifti(path, arr, vol.spacing)
    else:
        raise DataError(f"cannot save object of type {type(vol).__name__}")


def load_volume(path, as_labels: bool = False):
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    try:
        if _is_rgf(path):
            data, kind, spacing, _ = _read_rgf(path)
            as_labels = as_labels or kind == "label"
        else:
            data, spacing, _ = _parse_nifti(_read_maybe_gzip(path), path)
    except DataError:
        raise
    except Exception as exc:  # noqa: BLE001 - surface corrupt files with path
        raise DataError(f"corrupt file {path}: {exc}") from exc
    if data.ndim != 3:
        raise DataError(f"{path}: expected a 3D volume, got shape {data.shape}")
    if as_labels:
        return LabelVolume(torch.as_tensor(np.ascontiguousarray(data).astype(np.int64)),
                           spacing)
    return Volume(torch.as_tensor(np.ascontiguousarray(data).astype(np.float32)), spacing)


def save_field(path, field: DisplacementField, spacing=(1.0, 1.0, 1.0)) -> None:
    path = Path(path)
    arr = field.data.detach().cpu().numpy().astype(np.float32)
    if _is_rgf(path):
        _write_rgf(path, arr, "field", spacing, field.grid_scale)
    else:
        _write_nifti(path, arr, spacing, descrip=f"grid_scale={field.grid_scale}".encode())


def load_field(path) -> DisplacementField:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    try:
        if _is_rgf(path):
            data, kind, _, grid_scale = _read_rgf(path)
            if kind != "field":
                raise DataError(f"{path}: expected a field, found {kind}")
        else:
            data, _, grid_scale = _parse_nifti(_read_maybe_gzip(path), path)
    except DataError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise DataError(f"corrupt file {path}: {exc}") from exc
    if data.ndim != 4 or data.shape[0] != 3:
        raise DataError(f"{path}: expected a (3, d, h, w) field, got shape {data.shape}")
    return DisplacementField(torch.as_tensor(data.astype(np.float32)), grid_scale)


def peek_grid(path) -> tuple[tuple[int, ...], tuple[float, float, float]]:
    """Read only shape and spacing (cheap header inspection)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    if _is_rgf(path):
        buf = path.read_bytes()[:_RGF_HEADER.size]
        if len(buf) < _RGF_HEADER.size or buf[:4] != _RGF_MAGIC:
            raise DataError(f"{path}: not a raw grid file")
        _, _, _, _, d, h, w, s0, s1, s2 = _RGF_HEADER.unpack(buf)
        return (d, h, w), (s0, s1, s2)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)  # header-only decompress is not worth the complexity
    if len(raw) < _HDR_SIZE:
        raise DataError(f"{path}: truncated NIfTI header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    end = "<" if sizeof_hdr == 348 else ">"
    dims = struct.unpack_from(f"{end}8h", raw, 40)
    pixdim = struct.unpack_from(f"{end}8f", raw, 76)
    return ((dims[3], dims[2], dims[1]),
            (float(pixdim[3]), float(pixdim[2]), float(pixdim[1])))


# ---------------------------------------------------------------------------
# flat named-tensor checkpoints with content hash
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"CKPT"
_TORCH_DTYPES = {"f32": torch.float32, "f64": torch.float64, "i64": torch.int64}
_NP_DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8"}


def _dtype_code(t: torch.Tensor) -> str:
    for code, dt in _TORCH_DTYPES.items():
        if t.dtype == dt:
            return code
    raise DataError(f"unsupported checkpoint dtype {t.dtype}")


def save_named_tensors(path, tensors: dict[str, torch.Tensor], meta: dict) -> None:
    """Write tensors into a flat container with a manifest and payload hash."""
    entries = []
    payload = bytearray()
    for name, tensor in tensors.items():
        code = _dtype_code(tensor)
        raw = tensor.detach().cpu().contiguous().numpy().astype(_NP_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(tensor.shape),
                        "offset": len(payload), "nbytes": len(raw)})
        payload.extend(raw)
    manifest = {"format": 1, "meta": meta, "tensors": entries,
                "sha256": hashlib.sha256(bytes(payload)).hexdigest()}
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_CKPT_MAGIC + struct.pack("<I", len(blob)) + blob + bytes(payload))


def load_named_tensors(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint: {path}")
    buf = path.read_bytes()
    if len(buf) < 8 or buf[:4] != _CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    (mlen,) = struct.unpack_from("<I", buf, 4)
    try:
        manifest = json.loads(buf[8:8 + mlen].decode())
    except Exception as exc:  # noqa: BLE001
        raise DataError(f"{path}: corrupt checkpoint manifest: {exc}") from exc
    payload = buf[8 + mlen:]
    if hashlib.sha256(payload).hexdigest() != manifest.get("sha256"):
        raise DataError(f"{path}: checkpoint content hash mismatch (corrupt or truncated)")
    tensors = {}
    for entry in manifest["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_NP_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        tensors[entry["name"]] = torch.as_tensor(arr.copy(),
                                                 dtype=_TORCH_DTYPES[entry["dtype"]])
    return tensors, manifest["meta"]


# ---------------------------------------------------------------------------
# dataset manifests and pair expansion
# ---------------------------------------------------------------------------

@dataclass
class Case:
    case_id: str
    image: object                       # path or in-memory Volume
    label: object = None                # path or in-memory LabelVolume
    landmarks: object = None            # path or (N, 3) array, voxel coords

    def load_image(self) -> Volume:
        if isinstance(self.image, Volume):
            return self.image
        return load_volume(self.image)

    def load_label(self) -> LabelVolume | None:
        if self.label is None:
            return None
        if isinstance(self.label, LabelVolume):
            return self.label
        return load_volume(self.label, as_labels=True)

    def load_landmarks(self) -> np.ndarray | None:
        if self.landmarks is None:
            return None
        if isinstance(self.landmarks, np.ndarray):
            return self.landmarks
        pts = np.loadtxt(self.landmarks, delimiter=",", ndmin=2, dtype=np.float64)
        if pts.shape[1] != 3:
            raise DataError(f"{self.landmarks}: landmark rows must be z,y,x")
        return pts


@dataclass
class RegistrationPair:
    fixed: Case
    moving: Case
    gt_field: object = None             # optional path or DisplacementField

    @property
    def pair_id(self) -> str:
        return f"{self.fixed.case_id}__{self.moving.case_id}"

    def load_gt_field(self) -> DisplacementField | None:
        if self.gt_field is None:
            return None
        if isinstance(self.gt_field, DisplacementField):
            return self.gt_field
        return load_field(self.gt_field)


@dataclass
class TrainingSet:
    """Fixed/moving pair references sharing one grid shape and spacing."""

    pairs: list
    shape: tuple = dc_field(default=None)
    spacing: tuple = dc_field(default=None)

    def __post_init__(self):
        if not self.pairs:
            raise DataError("dataset contains no pairs")

    def __len__(self) -> int:
        return len(self.pairs)

    def load_pair(self, index: int) -> tuple[Volume, Volume]:
        pair = self.pairs[index]
        fixed, moving = pair.fixed.load_image(), pair.moving.load_image()
        if fixed.shape != moving.shape or fixed.spacing != moving.spacing:
            raise DataError(f"pair {pair.pair_id}: fixed/moving grid mismatch "
                            f"{fixed.shape}/{fixed.spacing} vs {moving.shape}/{moving.spacing}")
        return fixed, moving


def _expand_pairs(cases: list[Case], mode: str) -> list[RegistrationPair]:
    pairs = []
    if mode == "unordered":
        for i in range(len(cases)):
            for j in range(i + 1, len(cases)):
                pairs.append(RegistrationPair(cases[i], cases[j]))
    elif mode == "ordered":
        for i in range(len(cases)):
            for j in range(len(cases)):
                if i != j:
                    pairs.append(RegistrationPair(cases[i], cases[j]))
    else:
        raise DataError(f"unknown pairing mode {mode!r}")
    return pairs


def load_dataset(manifest_path, split: str | None = "train",
                 pairing: str | None = None) -> TrainingSet:
    """Load a dataset manifest and expand its pairing rule.

    ``unordered`` (default) enumerates each case pair once; ``ordered``
    includes both directions; ``explicit`` takes the manifest's pair list.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"missing manifest: {manifest_path}")
    try:
        spec = json.loads(manifest_path.read_text())
    except Exception as exc:  # noqa: BLE001
        raise DataError(f"corrupt manifest {manifest_path}: {exc}") from exc
    root = manifest_path.parent

    def resolve(rel):
        return None if rel is None else str(root / rel)

    cases = {}
    for entry in spec.get("cases", []):
        case = Case(entry["id"], resolve(entry["image"]), resolve(entry.get("label")),
                    resolve(entry.get("landmarks")))
        cases[case.case_id] = case
    if not cases:
        raise DataError(f"{manifest_path}: manifest lists no cases")

    selected = list(cases.values())
    splits = spec.get("splits") or {}
    if split is not None and splits:
        if split not in splits:
            raise DataError(f"{manifest_path}: no split named {split!r}")
        missing = [cid for cid in splits[split] if cid not in cases]
        if missing:
            raise DataError(f"{manifest_path}: split references unknown cases {missing}")
        selected = [cases[cid] for cid in splits[split]]

    mode = pairing or spec.get("pairing", "unordered")
    if mode == "explicit":
        gt_fields = spec.get("gt_fields", {})
        pairs = []
        chosen = {c.case_id for c in selected}
        for fid, mid in spec.get("pairs", []):
            if fid not in cases or mid not in cases:
                raise DataError(f"{manifest_path}: pair ({fid}, {mid}) references unknown case")
            if split is not None and splits and not (fid in chosen and mid in chosen):
                continue
            gt = gt_fields.get(f"{fid}__{mid}")
            pairs.append(RegistrationPair(cases[fid], cases[mid], resolve(gt)))
    else:
        pairs = _expand_pairs(selected, mode)
    if not pairs:
        raise DataError(f"{manifest_path}: pairing produced no pairs")

    shape = spacing = None
    for case in selected:
        if isinstance(case.image, (str, Path)):
            s, sp = peek_grid(case.image)
        else:
            s, sp = case.image.shape, case.image.spacing
        if shape is None:
            shape, spacing = tuple(s), tuple(sp)
        elif tuple(s) != shape or tuple(sp) != spacing:
            raise DataError(f"case {case.case_id}: grid {s}/{sp} differs from {shape}/{spacing}")
    return TrainingSet(pairs, shape=shape, spacing=spacing)


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    try:
        return json.loads(path.read_text())
    except Exception as exc:  # noqa: BLE001
        raise DataError(f"corrupt JSON {path}: {exc}") from exc


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
