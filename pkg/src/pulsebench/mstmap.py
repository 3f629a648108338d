"""Multi-scale spatial-temporal maps and their square-stacked image form.

An ROI trace set holds per-frame channel means for each facial region.
For every non-empty subset of regions and every channel, one map row is
formed by averaging the subset, band-pass filtering it and min-max
normalizing it. Maps are split into three temporal chunks stacked
vertically so that far-apart time segments land in the same attention
windows of the model.

Map rows and stacked images are float32 so the on-disk format
(``PSUMAP01``) round-trips bit-exactly.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataFormatError, RejectedInputError
from .timeseries import (
    HR_BAND,
    FreqBand,
    TimeSeries,
    bandpass_rows,
    minmax_array,
)

MAP_MAGIC = b"PSUMAP01"

DEFAULT_CHANNELS = ("R", "G", "B", "Y", "U", "V")


@dataclass(frozen=True)
class RoiTraceSet:
    """Per-frame, per-ROI, per-channel mean pixel values.

    Parameters
    ----------
    values : ndarray, shape (n_rois, n_channels, T)
    fs : float
        Sampling rate in Hz.
    subject_id : str
        Opaque identity used for subject-exclusive fold assignment.
    channel_names : sequence of str
    """

    values: np.ndarray
    fs: float
    subject_id: str = ""
    channel_names: tuple = DEFAULT_CHANNELS[:3]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise RejectedInputError("trace values must be [n_rois, n_channels, T]")
        if not np.all(np.isfinite(values)):
            raise RejectedInputError("trace values contain NaN/Inf")
        n_rois, n_channels, t = values.shape
        if n_rois < 1 or n_channels < 1:
            raise RejectedInputError("need at least one ROI and one channel")
        if t < 9:
            raise RejectedInputError(f"trace length {t} < 9")
        if n_channels != len(self.channel_names):
            raise RejectedInputError(
                f"{n_channels} channels but {len(self.channel_names)} names"
            )
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "fs", float(self.fs))
        object.__setattr__(self, "channel_names", tuple(self.channel_names))

    @property
    def n_rois(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    @property
    def n_frames(self) -> int:
        return self.values.shape[2]

    def window(self, start: int, length: int) -> "RoiTraceSet":
        return RoiTraceSet(
            self.values[:, :, start : start + length],
            self.fs,
            self.subject_id,
            self.channel_names,
        )

    def mean_rgb(self, roi_indices: Optional[Sequence[int]] = None) -> np.ndarray:
        """Average the selected ROIs; returns [n_channels, T]."""
        if roi_indices is None:
            return self.values.mean(axis=0)
        return self.values[list(roi_indices)].mean(axis=0)


def roi_subsets(n_rois: int) -> list[tuple[int, ...]]:
    """All non-empty ROI subsets in binary-counting order.

    Mask m enumerates 1..2**n-1 with bit i selecting ROI i, so the order
    is deterministic: (0,), (1,), (0,1), (2,), (0,2), ...
    """
    return [
        tuple(i for i in range(n_rois) if mask >> i & 1)
        for mask in range(1, 2**n_rois)
    ]


@dataclass(frozen=True)
class SignalMap:
    """Base for row-per-signal maps: rows are [R, T] float32 in [0, 1]."""

    rows: np.ndarray
    fs: float
    n_channels: int = 1
    row_index: Optional[tuple] = None

    def __post_init__(self):
        rows = np.ascontiguousarray(np.asarray(self.rows), dtype=np.float32)
        if rows.ndim != 2:
            raise RejectedInputError("map rows must be 2-D [R, T]")
        if not np.all(np.isfinite(rows)):
            raise RejectedInputError("map rows contain NaN/Inf")
        if rows.shape[0] % self.n_channels != 0:
            raise RejectedInputError(
                f"{rows.shape[0]} rows not divisible by {self.n_channels} channels"
            )
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "fs", float(self.fs))
        if self.row_index is not None:
            object.__setattr__(
                self,
                "row_index",
                tuple((tuple(s), str(c)) for s, c in self.row_index),
            )

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    @property
    def n_frames(self) -> int:
        return self.rows.shape[1]

    @property
    def n_subsets(self) -> int:
        return self.rows.shape[0] // self.n_channels

    @property
    def kind(self) -> str:
        return _KIND_BY_TYPE[type(self)]


@dataclass(frozen=True)
class MstMap(SignalMap):
    """Conditioned multi-scale spatial-temporal map."""


@dataclass(frozen=True)
class BvpMap(SignalMap):
    """Ground-truth BVP replicated across all rows."""

    def __post_init__(self):
        super().__post_init__()
        if not np.all(self.rows == self.rows[0]):
            raise RejectedInputError("BVP map rows must all be identical")


@dataclass(frozen=True)
class PbvpMap(SignalMap):
    """Pseudo-BVP map; one traditional-method signal per ROI subset."""

    fallback_rows: tuple = ()


_KIND_BY_TYPE = {MstMap: "mstmap", BvpMap: "bvpmap", PbvpMap: "pbvpmap"}
_TYPE_BY_KIND = {v: k for k, v in _KIND_BY_TYPE.items()}


def condition_rows(raw: np.ndarray, fs: float, band: FreqBand) -> np.ndarray:
    """Band-pass + min-max the rows of a [R, T] array (float32 output)."""
    return minmax_array(bandpass_rows(raw, fs, band)).astype(np.float32)


def build_mstmap(traces: RoiTraceSet, band: FreqBand = HR_BAND) -> MstMap:
    """Build the conditioned MSTmap from an ROI trace set.

    Row order: ROI subsets in binary-counting order, channels innermost,
    i.e. row = subset_index * n_channels + channel_index. Each row is the
    subset-averaged trace, band-passed then min-max normalized.
    """
    if traces.n_frames % 3 != 0:
        raise RejectedInputError(
            f"trace length {traces.n_frames} not divisible by 3"
        )
    subsets = roi_subsets(traces.n_rois)
    raw = np.empty(
        (len(subsets) * traces.n_channels, traces.n_frames), dtype=np.float64
    )
    index = []
    for s_idx, subset in enumerate(subsets):
        mean = traces.values[list(subset)].mean(axis=0)  # [n_channels, T]
        for c_idx, name in enumerate(traces.channel_names):
            raw[s_idx * traces.n_channels + c_idx] = mean[c_idx]
            index.append((subset, name))
    rows = condition_rows(raw, traces.fs, band)
    return MstMap(rows, traces.fs, traces.n_channels, tuple(index))


def build_bvpmap(
    bvp: TimeSeries,
    r_rows: int,
    t: Optional[int] = None,
    n_channels: int = 1,
    band: FreqBand = HR_BAND,
) -> BvpMap:
    """Replicate the conditioned BVP across ``r_rows`` identical rows.

    ``t`` optionally pins the expected window length; a mismatch is a
    rejected input (the BVP label must cover the same frames as the map).
    """
    if t is not None and len(bvp) != t:
        raise RejectedInputError(f"bvp length {len(bvp)} != expected T {t}")
    if r_rows < 1:
        raise RejectedInputError("r_rows must be >= 1")
    row = condition_rows(bvp.samples[np.newaxis, :], bvp.fs, band)
    return BvpMap(np.repeat(row, r_rows, axis=0), bvp.fs, n_channels)


@dataclass(frozen=True)
class MapLayout:
    """Descriptor of how a map was folded into a stacked image.

    Records enough to invert the stacking exactly, including any rows
    appended to pad the image height (padding repeats the last subset and
    is dropped again by :func:`unstack`).
    """

    kind: str
    chunks: int
    chunk_len: int
    n_rows: int
    n_frames: int
    n_channels: int
    per_chunk: int
    per_chunk_padded: int
    rows_mode: str
    fs: float
    row_index: Optional[tuple] = None

    def to_json(self) -> dict:
        d = {
            "kind": self.kind,
            "chunks": self.chunks,
            "chunk_len": self.chunk_len,
            "n_rows": self.n_rows,
            "n_frames": self.n_frames,
            "n_channels": self.n_channels,
            "per_chunk": self.per_chunk,
            "per_chunk_padded": self.per_chunk_padded,
            "rows_mode": self.rows_mode,
            "fs": self.fs,
        }
        if self.row_index is not None:
            d["row_index"] = [[list(s), c] for s, c in self.row_index]
        return d

    @staticmethod
    def from_json(d: dict) -> "MapLayout":
        try:
            row_index = d.get("row_index")
            if row_index is not None:
                row_index = tuple((tuple(s), c) for s, c in row_index)
            return MapLayout(
                kind=d["kind"],
                chunks=int(d["chunks"]),
                chunk_len=int(d["chunk_len"]),
                n_rows=int(d["n_rows"]),
                n_frames=int(d["n_frames"]),
                n_channels=int(d["n_channels"]),
                per_chunk=int(d["per_chunk"]),
                per_chunk_padded=int(d["per_chunk_padded"]),
                rows_mode=d["rows_mode"],
                fs=float(d["fs"]),
                row_index=row_index,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"corrupt map layout: {exc}") from exc


@dataclass(frozen=True)
class StackedMap:
    """A map folded into an image of shape [H, W, C]."""

    image: np.ndarray
    layout: MapLayout

    def __post_init__(self):
        image = np.ascontiguousarray(np.asarray(self.image), dtype=np.float32)
        if image.ndim != 3:
            raise RejectedInputError("stacked image must be [H, W, C]")
        object.__setattr__(self, "image", image)

    @property
    def chunk_len(self) -> int:
        return self.layout.chunk_len

    @property
    def hwc(self) -> tuple[int, int, int]:
        return self.image.shape


def stack_square(
    m: SignalMap,
    chunks: int = 3,
    pad_height_multiple: Optional[int] = None,
    rows_mode: str = "channels",
) -> StackedMap:
    """Fold a [R, T] map into an image of ``chunks`` vertical time blocks.

    Temporal chunk k occupies vertical block k (chunk 0 on top). With
    ``rows_mode="channels"`` the per-subset color channels move onto the
    image channel axis; with ``"rows"`` every map row stays a pixel row
    and the image has one channel.

    ``pad_height_multiple`` repeats the last subset (or row) within each
    block until the total image height is divisible by the given value,
    e.g. the model patch size; padding is recorded in the layout and
    dropped by :func:`unstack`.
    """
    if m.n_frames % chunks != 0:
        raise RejectedInputError(
            f"T={m.n_frames} not divisible into {chunks} chunks"
        )
    if rows_mode not in ("channels", "rows"):
        raise RejectedInputError(f"unknown rows_mode {rows_mode!r}")
    w = m.n_frames // chunks
    n_ch = m.n_channels if rows_mode == "channels" else 1
    per_chunk = m.n_rows // n_ch
    per_chunk_padded = per_chunk
    if pad_height_multiple is not None:
        while (chunks * per_chunk_padded) % pad_height_multiple != 0:
            per_chunk_padded += 1

    # rows -> [per_chunk, n_ch, T] -> chunked along time
    grouped = m.rows.reshape(per_chunk, n_ch, m.n_frames)
    image = np.empty(
        (chunks * per_chunk_padded, w, n_ch), dtype=np.float32
    )
    for k in range(chunks):
        block = grouped[:, :, k * w : (k + 1) * w].transpose(0, 2, 1)
        top = k * per_chunk_padded
        image[top : top + per_chunk] = block
        image[top + per_chunk : top + per_chunk_padded] = block[-1]

    layout = MapLayout(
        kind=m.kind,
        chunks=chunks,
        chunk_len=w,
        n_rows=m.n_rows,
        n_frames=m.n_frames,
        n_channels=m.n_channels,
        per_chunk=per_chunk,
        per_chunk_padded=per_chunk_padded,
        rows_mode=rows_mode,
        fs=m.fs,
        row_index=m.row_index,
    )
    return StackedMap(image, layout)


def unstack(s: StackedMap) -> SignalMap:
    """Exact inverse of :func:`stack_square` (padding rows dropped)."""
    lay = s.layout
    h, w, c = s.image.shape
    if (
        lay.rows_mode not in ("channels", "rows")
        or h != lay.chunks * lay.per_chunk_padded
        or w != lay.chunk_len
        or lay.chunks * lay.chunk_len != lay.n_frames
        or lay.kind not in _TYPE_BY_KIND
    ):
        raise DataFormatError("layout inconsistent with stacked image")
    n_ch = lay.n_channels if lay.rows_mode == "channels" else 1
    if c != n_ch or lay.per_chunk * n_ch != lay.n_rows:
        raise DataFormatError("layout channel structure inconsistent")
    grouped = np.empty(
        (lay.per_chunk, n_ch, lay.n_frames), dtype=np.float32
    )
    for k in range(lay.chunks):
        top = k * lay.per_chunk_padded
        block = s.image[top : top + lay.per_chunk]
        grouped[:, :, k * lay.chunk_len : (k + 1) * lay.chunk_len] = (
            block.transpose(0, 2, 1)
        )
    rows = grouped.reshape(lay.n_rows, lay.n_frames)
    cls = _TYPE_BY_KIND[lay.kind]
    return cls(rows, lay.fs, lay.n_channels, lay.row_index)


def window_samples(
    traces: RoiTraceSet, t: int, stride: int
) -> list[RoiTraceSet]:
    """Slice the trace set into windows of length ``t`` every ``stride``.

    With ``stride == t`` this yields the non-overlapping test windows,
    remainder dropped. A trace shorter than ``t`` yields no windows and a
    warning.
    """
    if t < 2 or stride < 1:
        raise RejectedInputError(f"invalid window t={t}, stride={stride}")
    length = traces.n_frames
    if t > length:
        warnings.warn(
            f"trace length {length} < window {t}: no windows", stacklevel=2
        )
        return []
    return [traces.window(s, t) for s in range(0, length - t + 1, stride)]


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def write_map(path, m: "SignalMap | StackedMap") -> None:
    """Serialize a map: magic, length-prefixed JSON header, float32 payload."""
    if isinstance(m, StackedMap):
        header = {
            "format": "stacked",
            "shape": list(m.image.shape),
            "fs": m.layout.fs,
            "layout": m.layout.to_json(),
            "row_index": None,
        }
        payload = m.image
    else:
        header = {
            "format": m.kind,
            "shape": list(m.rows.shape),
            "fs": m.fs,
            "layout": None,
            "n_channels": m.n_channels,
            "row_index": (
                None
                if m.row_index is None
                else [[list(s), c] for s, c in m.row_index]
            ),
        }
        payload = m.rows
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAP_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(np.ascontiguousarray(payload, dtype="<f4").tobytes())


def read_map(path) -> "SignalMap | StackedMap":
    """Inverse of :func:`write_map`; bit-exact round-trip."""
    data = Path(path).read_bytes()
    if len(data) < len(MAP_MAGIC) + 4 or data[: len(MAP_MAGIC)] != MAP_MAGIC:
        raise DataFormatError(f"{path}: bad magic (not a PSUMAP01 file)")
    off = len(MAP_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    if off + hlen > len(data):
        raise DataFormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: corrupt header: {exc}") from exc
    off += hlen
    shape = tuple(int(x) for x in header["shape"])
    expected = int(np.prod(shape)) * 4
    if len(data) - off != expected:
        raise DataFormatError(
            f"{path}: payload is {len(data) - off} bytes, expected {expected}"
        )
    values = np.frombuffer(data[off:], dtype="<f4").reshape(shape)
    if header["format"] == "stacked":
        return StackedMap(values, MapLayout.from_json(header["layout"]))
    kind = header["format"]
    if kind not in _TYPE_BY_KIND:
        raise DataFormatError(f"{path}: unknown map kind {kind!r}")
    row_index = header.get("row_index")
    if row_index is not None:
        row_index = tuple((tuple(s), c) for s, c in row_index)
    return _TYPE_BY_KIND[kind](
        values, header["fs"], header.get("n_channels", 1), row_index
    )


def write_traces_csv(path, traces: RoiTraceSet) -> None:
    """Write traces as ``frame,roi,channel,value`` plus a JSON sidecar."""
    path = Path(path)
    lines = ["frame,roi,channel,value"]
    for t in range(traces.n_frames):
        for r in range(traces.n_rois):
            for c, name in enumerate(traces.channel_names):
                lines.append(f"{t},{r},{name},{float(traces.values[r, c, t])!r}")
    path.write_text("\n".join(lines) + "\n")
    sidecar = {
        "fs": traces.fs,
        "subject_id": traces.subject_id,
        "channel_names": list(traces.channel_names),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True))


def read_traces_csv(path) -> RoiTraceSet:
    """Read traces written by :func:`write_traces_csv`."""
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.exists():
        raise DataFormatError(f"missing sidecar {sidecar_path}")
    try:
        sidecar = json.loads(sidecar_path.read_text())
        fs = float(sidecar["fs"])
        subject_id = str(sidecar["subject_id"])
        channel_names = [str(c) for c in sidecar["channel_names"]]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"corrupt sidecar {sidecar_path}: {exc}") from exc

    chan_idx = {name: i for i, name in enumerate(channel_names)}
    entries = []
    with open(path) as f:
        header = f.readline().strip()
        if header != "frame,roi,channel,value":
            raise DataFormatError(f"{path}: unexpected CSV header {header!r}")
        for ln, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise DataFormatError(f"{path}:{ln}: expected 4 columns")
            try:
                entries.append(
                    (int(parts[0]), int(parts[1]), chan_idx[parts[2]],
                     float(parts[3]))
                )
            except (ValueError, KeyError) as exc:
                raise DataFormatError(f"{path}:{ln}: {exc}") from exc
    if not entries:
        raise DataFormatError(f"{path}: no data rows")
    n_frames = max(e[0] for e in entries) + 1
    n_rois = max(e[1] for e in entries) + 1
    values = np.full((n_rois, len(channel_names), n_frames), np.nan)
    for frame, roi, chan, value in entries:
        values[roi, chan, frame] = value
    if np.any(np.isnan(values)):
        raise DataFormatError(f"{path}: incomplete trace grid")
    return RoiTraceSet(values, fs, subject_id, channel_names)
