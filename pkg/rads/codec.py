"""
Latent action codec.

Steering acts on a compact code of the caption embedding rather than on the
embedding itself:

    e' = Dec(Enc(e) + s·u),   u ∈ [−1, 1]^d,   s = action_scale

The default codec is linear: the encoder projects onto the top-d principal
directions of the caption set (uncentered, so the zero embedding maps to the
zero code) and the decoder is its pseudo-inverse.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from rads.dynamics import CaptionEmbedding
from rads.errors import CodecError, DimensionError

logger = logging.getLogger(__name__)

CODEC_FORMAT = "rads-codec"
CODEC_VERSION = 1


@dataclass(frozen=True)
class CodecParams:
    encoder: np.ndarray     # (d, n_e)
    decoder: np.ndarray     # (n_e, d)
    action_scale: float = 0.5

    @property
    def d(self) -> int:
        return self.encoder.shape[0]

    @property
    def n_e(self) -> int:
        return self.encoder.shape[1]

    @property
    def lipschitz(self) -> float:
        """L with ‖steer(e,u₁) − steer(e,u₂)‖ ≤ L·‖u₁ − u₂‖."""
        return self.action_scale * float(np.linalg.norm(self.decoder, ord=2))

    def steer(self, e: CaptionEmbedding, u: np.ndarray) -> CaptionEmbedding:
        return steer(e, u, self)


def _check(name: str, v: np.ndarray, length: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (length,):
        raise DimensionError(f"{name} has shape {v.shape}, expected ({length},)")
    return v


def encode(e: CaptionEmbedding, params: CodecParams) -> np.ndarray:
    return params.encoder @ _check("embedding", e.e, params.n_e)


def decode(z: np.ndarray, params: CodecParams) -> np.ndarray:
    return params.decoder @ _check("code", z, params.d)


def steer(e: CaptionEmbedding, u: np.ndarray, params: CodecParams) -> CaptionEmbedding:
    u = _check("action", u, params.d)
    z = encode(e, params) + params.action_scale * u
    return CaptionEmbedding(decode(z, params), caption_id=e.caption_id)


def round_trip_cosines(captions: list[CaptionEmbedding], params: CodecParams) -> np.ndarray:
    """cos(Dec(Enc(e)), e) per caption; zero captions count as exact."""
    out = []
    for c in captions:
        norm = np.linalg.norm(c.e)
        if norm == 0.0:
            out.append(1.0)
            continue
        rec = decode(encode(c, params), params)
        rec_norm = np.linalg.norm(rec)
        out.append(0.0 if rec_norm == 0.0 else float(rec @ c.e / (rec_norm * norm)))
    return np.array(out)


def fit_codec(
    captions: list[CaptionEmbedding],
    d: int,
    action_scale: float = 0.5,
    min_cosine: float | None = 0.99,
) -> CodecParams:
    """Principal-subspace codec fitted to `captions`."""
    if not captions:
        raise CodecError("cannot fit a codec to an empty caption set")
    mat = np.stack([np.asarray(c.e, dtype=np.float64) for c in captions])
    n_e = mat.shape[1]
    if not 1 <= d <= n_e:
        raise DimensionError(f"latent action dimension d = {d} must lie in [1, {n_e}]")
    rank = int(np.linalg.matrix_rank(mat))
    if rank < d:
        raise CodecError(
            f"caption set has rank {rank}, fewer than d = {d} independent directions",
            detail={"rank": rank, "d": d, "n_captions": len(captions)},
        )

    _, _, vt = np.linalg.svd(mat, full_matrices=False)
    encoder = vt[:d].copy()
    # Fix the SVD sign ambiguity so refits give identical parameters.
    for row in encoder:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    params = CodecParams(encoder=encoder, decoder=np.linalg.pinv(encoder), action_scale=action_scale)

    cos = round_trip_cosines(captions, params)
    logger.info("Fitted linear codec d=%d on %d captions, min round-trip cosine %.5f", d, len(captions), cos.min())
    if min_cosine is not None and cos.min() < min_cosine:
        worst = int(np.argmin(cos))
        raise CodecError(
            f"round-trip cosine {cos[worst]:.4f} for caption '{captions[worst].caption_id}' is below {min_cosine}",
            detail={"min_cosine": float(cos.min()), "caption_id": captions[worst].caption_id},
        )
    return params


# ── Persistence ─────────────────────────────────────────────────────

def codec_to_dict(params: CodecParams) -> dict:
    return {
        "format": CODEC_FORMAT,
        "version": CODEC_VERSION,
        "action_scale": params.action_scale,
        "encoder": params.encoder.tolist(),
        "decoder": params.decoder.tolist(),
    }


def codec_from_dict(doc: dict) -> CodecParams:
    if doc.get("format") != CODEC_FORMAT:
        raise CodecError(f"not a codec document (format={doc.get('format')!r})")
    if doc.get("version") != CODEC_VERSION:
        raise CodecError(f"codec version {doc.get('version')} is not supported (expected {CODEC_VERSION})")
    encoder = np.array(doc["encoder"], dtype=np.float64)
    decoder = np.array(doc["decoder"], dtype=np.float64)
    if encoder.ndim != 2 or decoder.shape != encoder.T.shape:
        raise CodecError(f"codec shapes disagree: encoder {encoder.shape}, decoder {decoder.shape}")
    return CodecParams(encoder=encoder, decoder=decoder, action_scale=float(doc["action_scale"]))


def save_codec(path: str | Path, params: CodecParams) -> None:
    Path(path).write_text(json.dumps(codec_to_dict(params), indent=2) + "\n")


def load_codec(path: str | Path) -> CodecParams:
    try:
        return codec_from_dict(json.loads(Path(path).read_text()))
    except (OSError, ValueError, KeyError) as exc:
        raise CodecError(f"cannot load codec from {path}: {exc}") from exc
