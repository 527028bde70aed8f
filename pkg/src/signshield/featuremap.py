"""Local feature mapping: find rendered words and map them to sign labels.

:class:`GlyphTemplateDetector` slides every 5x7 font glyph over the
grayscale image, scores windows by normalized cross-correlation, keeps
the best non-overlapping glyph hits and strings them into words. Any
object with a ``detect(image)`` method returning :class:`Detection`
records can stand in for it (an OCR model, for instance).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Protocol

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import glyphs
from .dataset import DEFAULT_EXTENT, DIGIT_SCALE, SIGN_CLASSES, glyph_scale

GLYPH_THRESHOLD = 0.8
_MIN_STD = 1e-6
# a lone glyph is usually a stroke corner or edge read as L/T/U; no sign word is that short
MIN_WORD_LENGTH = 2


@dataclass(frozen=True)
class Detection:
    word: str
    region: tuple  # (top, left, height, width)
    score: float


class TextDetector(Protocol):
    def detect(self, image: np.ndarray) -> list[Detection]: ...


def _template_bank(scale: int, dh: int, dw: int):
    h, w = glyphs.GLYPH_H * scale + dh, glyphs.GLYPH_W * scale + dw
    bank = []
    for ch in glyphs.CHARACTERS:
        base = glyphs.glyph(ch, 1).astype(np.float64)
        rows = np.minimum((np.arange(h) + 0.5) * glyphs.GLYPH_H / h, glyphs.GLYPH_H - 1).astype(int)
        cols = np.minimum((np.arange(w) + 0.5) * glyphs.GLYPH_W / w, glyphs.GLYPH_W - 1).astype(int)
        t = base[rows][:, cols].ravel()
        t = t - t.mean()
        bank.append(t / np.linalg.norm(t))
    return (h, w), np.array(bank)


class GlyphTemplateDetector:
    """Polarity-agnostic glyph matcher at the renderer's glyph scales.

    ``scales`` lists font dot sizes to search. Scales of 2 or more are
    also searched with templates one pixel shorter and taller (and
    narrower and wider), absorbing off-by-one resampling of the text.
    """

    def __init__(self, scales: Iterable[int] = (1, DIGIT_SCALE), threshold: float = GLYPH_THRESHOLD):
        self.threshold = threshold
        self.banks = []
        for s in sorted(set(scales)):
            deltas = (-1, 0, 1) if s >= 2 else (0,)
            for d in deltas:
                size, bank = _template_bank(s, d, d)
                self.banks.append((s, size, bank))

    @classmethod
    def for_extent(cls, extent: int = DEFAULT_EXTENT, threshold: float = GLYPH_THRESHOLD):
        u = glyph_scale(extent)
        return cls((u, DIGIT_SCALE * u), threshold)

    def glyph_hits(self, gray: np.ndarray) -> list[tuple]:
        """All best-per-window hits above threshold: ``(score, top, left, h, w, char, scale)``."""
        hits = []
        for scale, (th, tw), bank in self.banks:
            if gray.shape[0] < th or gray.shape[1] < tw:
                continue
            win = sliding_window_view(gray, (th, tw))
            ny, nx = win.shape[:2]
            win = win.reshape(ny * nx, th * tw)
            win = win - win.mean(axis=1, keepdims=True)
            norms = np.linalg.norm(win, axis=1)
            ok = norms > _MIN_STD * np.sqrt(th * tw)
            if not ok.any():
                continue
            ncc = np.abs(win[ok] @ bank.T) / norms[ok, None]
            best = ncc.argmax(axis=1)
            score = ncc[np.arange(len(best)), best]
            keep = score >= self.threshold
            pos = np.flatnonzero(ok)[keep]
            for p, b, sc in zip(pos, best[keep], score[keep]):
                top, left = divmod(int(p), nx)
                hits.append((float(min(sc, 1.0)), top, left, th, tw, glyphs.CHARACTERS[b], scale))
        return hits

    @staticmethod
    def _suppress(hits):
        """Greedy non-maximum suppression: a hit overlapping a better one by >30% of its area is dropped."""
        hits = sorted(hits, key=lambda h: (-h[0], h[1], h[2], h[6]))
        kept = []
        for h in hits:
            _, t, l, hh, ww, _, _ = h
            clash = False
            for k in kept:
                _, kt, kl, kh, kw, _, _ = k
                oy = min(t + hh, kt + kh) - max(t, kt)
                ox = min(l + ww, kl + kw) - max(l, kl)
                if oy > 0 and ox > 0 and oy * ox > 0.3 * min(hh * ww, kh * kw):
                    clash = True
                    break
            if not clash:
                kept.append(h)
        return kept

    @staticmethod
    def _group(hits):
        words = []
        pending = sorted(hits, key=lambda h: (h[6], h[1], h[2]))
        while pending:
            seed = pending.pop(0)
            cy = 2 * seed[1] + seed[3]
            # same font scale and vertical centres within one dot: the same text line
            line = [seed] + [h for h in pending if h[6] == seed[6] and abs(2 * h[1] + h[3] - cy) <= 2 * h[6]]
            pending = [h for h in pending if h not in line]
            line.sort(key=lambda h: h[2])
            current = [line[0]]
            for h in line[1:]:
                prev = current[-1]
                gap = h[2] - (prev[2] + prev[4])
                # glyphs are one font dot apart; anything else is a different word or a stray hit
                if abs(gap - h[6]) <= 1:
                    current.append(h)
                else:
                    words.append(current)
                    current = [h]
            words.append(current)
        out = []
        for w in words:
            if len(w) < MIN_WORD_LENGTH:
                continue
            top = min(h[1] for h in w)
            left = w[0][2]
            bottom = max(h[1] + h[3] for h in w)
            right = w[-1][2] + w[-1][4]
            out.append(Detection("".join(h[5] for h in w), (top, left, bottom - top, right - left),
                                 min(h[0] for h in w)))
        return sorted(out, key=lambda d: (d.region[0], d.region[1]))

    def detect(self, image: np.ndarray) -> list[Detection]:
        img = np.asarray(image, dtype=np.float64)
        gray = img.mean(axis=2) if img.ndim == 3 else img
        return self._group(self._suppress(self.glyph_hits(gray)))


_DEFAULT_DETECTORS: dict = {}


def detect_text(x: np.ndarray, detector: TextDetector | None = None) -> list[Detection]:
    if detector is None:
        extent = x.shape[0]
        detector = _DEFAULT_DETECTORS.get(extent)
        if detector is None:
            detector = _DEFAULT_DETECTORS[extent] = GlyphTemplateDetector.for_extent(extent)
    return detector.detect(x)


class WordLabelMap:
    """Distinguishing token sets mapped to class ids.

    No entry's token set may be a subset of another's, so a single
    entry can never be matched only because a longer one was.
    """

    def __init__(self, entries: dict):
        self.entries = {frozenset(self._norm(t) for t in k): v for k, v in entries.items()}
        keys = list(self.entries)
        for a in keys:
            for b in keys:
                if a is not b and a <= b:
                    raise ValueError(f"token set {sorted(a)} is contained in {sorted(b)}")

    @staticmethod
    def _norm(token: str) -> str:
        return token.strip().upper()

    @classmethod
    def default(cls) -> "WordLabelMap":
        return cls({frozenset(c.text): c.id for c in SIGN_CLASSES if c.has_text})

    def tokens(self, words) -> set:
        out = set()
        for w in words:
            out.update(self._norm(t) for t in str(w).split())
        out.discard("")
        return out

    def lookup(self, words) -> int | None:
        found = self.tokens(words)
        matches = {label for key, label in self.entries.items() if key <= found}
        # several full entries at once (e.g. two signs in frame) is treated as no match
        return matches.pop() if len(matches) == 1 else None


DEFAULT_WORD_MAP = WordLabelMap.default()


def map_to_label(words, word_map: WordLabelMap | None = None) -> int | None:
    return (word_map or DEFAULT_WORD_MAP).lookup(words)


def feature_label(x: np.ndarray, detector: TextDetector | None = None, word_map: WordLabelMap | None = None):
    return map_to_label([d.word for d in detect_text(x, detector)], word_map)
