"""Corpus ingestion: alphabet, PGM images, JSONL manifests and a synthetic generator."""
from __future__ import annotations

import dataclasses
import json
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np


class DataError(ValueError):
    """Malformed input data: manifests, images or transcripts."""


BLANK_TOKEN = "<blank>"
DEFAULT_CHARS = " " + string.ascii_lowercase


class Alphabet:
    """Character inventory with the CTC blank fixed at index 0."""

    def __init__(self, chars: Iterable[str] = DEFAULT_CHARS):
        chars = list(chars)
        if len(set(chars)) != len(chars):
            raise DataError("alphabet characters must be unique")
        if " " not in chars:
            raise DataError("alphabet must contain the space character")
        for ch in chars:
            if len(ch) != 1:
                raise DataError(f"alphabet entries must be single characters, got {ch!r}")
        self.chars = chars
        self._index = {ch: i + 1 for i, ch in enumerate(chars)}

    @property
    def tokens(self) -> list[str]:
        return [BLANK_TOKEN] + self.chars

    def __len__(self) -> int:
        return len(self.chars) + 1

    def __contains__(self, ch: str) -> bool:
        return ch in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Alphabet) and self.chars == other.chars

    def __repr__(self) -> str:
        return f"Alphabet({''.join(self.chars)!r})"

    def missing(self, text: str) -> list[str]:
        return sorted({ch for ch in text if ch not in self._index})

    def encode(self, text: str) -> list[int]:
        if not text:
            raise DataError("cannot encode an empty transcript")
        try:
            return [self._index[ch] for ch in text]
        except KeyError as exc:
            raise DataError(f"character {exc.args[0]!r} is not in the alphabet") from None

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == 0:
                raise DataError("label id 0 is the blank and has no character")
            out.append(self.chars[i - 1])
        return "".join(out)

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Alphabet":
        chars = set(" ")
        for t in texts:
            chars.update(t)
        return cls(sorted(chars))


def encode_transcript(alphabet: Alphabet, text: str) -> list[int]:
    return alphabet.encode(text)


def decode_labels(alphabet: Alphabet, ids: Iterable[int]) -> str:
    return alphabet.decode(ids)


# ---------------------------------------------------------------- PGM

def _pgm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated header integers, skipping comments."""
    vals: list[int] = []
    pos = 2
    while len(vals) < count:
        if pos >= len(buf):
            raise DataError("truncated PGM header")
        ch = buf[pos : pos + 1]
        if ch == b"#":
            end = buf.find(b"\n", pos)
            pos = len(buf) if end < 0 else end + 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(buf) and buf[pos : pos + 1].isdigit():
                pos += 1
            if start == pos:
                raise DataError(f"unexpected byte {ch!r} in PGM header")
            vals.append(int(buf[start:pos]))
    # exactly one whitespace byte separates the header from the raster
    return vals, pos + 1


def decode_pgm(buf: bytes) -> np.ndarray:
    """Decode binary P5 bytes into a float64 array scaled to [0, 1] (no inversion)."""
    if buf[:2] != b"P5":
        raise DataError(f"not a binary PGM (P5) file: magic {buf[:2]!r}")
    (width, height, maxval), start = _pgm_tokens(buf, 3)
    if width <= 0 or height <= 0:
        raise DataError(f"invalid PGM size {width}x{height}")
    if not 0 < maxval <= 255:
        raise DataError(f"unsupported PGM maxval {maxval} (need 1..255)")
    raster = buf[start : start + width * height]
    if len(raster) < width * height:
        raise DataError(f"truncated PGM payload: expected {width * height} bytes, got {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return np.clip(arr.astype(np.float64) / maxval, 0.0, 1.0)


def encode_pgm(pixels: np.ndarray) -> bytes:
    """Encode intensities in [0, 1] as an 8-bit P5 file."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 2:
        raise DataError("PGM encoding needs a 2-D array")
    h, w = pixels.shape
    raster = np.round(np.clip(pixels, 0.0, 1.0) * 255).astype(np.uint8)
    return b"P5\n%d %d\n255\n" % (w, h) + raster.tobytes()


def read_image(path, invert: Optional[bool] = None) -> np.ndarray:
    """Load a P5 PGM as ink-high intensities in [0, 1].

    With ``invert=None`` light-background images (mean >= 0.5) are inverted.
    """
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    try:
        img = decode_pgm(buf)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None
    if invert is None:
        invert = img.mean() >= 0.5
    return 1.0 - img if invert else img


def write_image(path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(pixels))


# ---------------------------------------------------------------- manifest

@dataclass(frozen=True)
class Entry:
    image: str
    text: str


@dataclass
class DatasetIndex:
    entries: list[Entry]
    split: str = "train"
    preset: str = "line"
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.entries)

    def image_path(self, entry: Entry) -> Path:
        p = Path(entry.image)
        return p if p.is_absolute() else self.root / p

    def texts(self) -> list[str]:
        return [e.text for e in self.entries]

    def load(self, i: int) -> tuple[np.ndarray, str]:
        e = self.entries[i]
        return read_image(self.image_path(e)), e.text


def load_manifest(path, alphabet: Optional[Alphabet] = None, split: str = "train", preset: str = "line") -> DatasetIndex:
    """Parse a JSON Lines manifest of {"image", "text"} records.

    Relative image paths resolve against the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    entries = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or not isinstance(rec.get("image"), str) or not isinstance(rec.get("text"), str):
                raise DataError(f"{path}:{lineno}: record needs string fields 'image' and 'text'")
            text = rec["text"]
            if not text.strip():
                raise DataError(f"{path}:{lineno}: empty transcript")
            if alphabet is not None:
                bad = alphabet.missing(text)
                if bad:
                    raise DataError(f"{path}:{lineno}: character(s) {', '.join(map(repr, bad))} not in alphabet")
            entries.append(Entry(rec["image"], text))
    return DatasetIndex(entries, split=split, preset=preset, root=path.parent)


def write_manifest(path, entries: Sequence[Entry]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps({"image": e.image, "text": e.text}, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------- synthetic corpus

# 5 columns x 7 rows per glyph, '#' is ink
_GLYPH_ROWS = {
    " ": [".....", ".....", ".....", ".....", ".....", ".....", "....."],
    "a": [".....", ".....", ".###.", "....#", ".####", "#...#", ".####"],
    "b": ["#....", "#....", "#.##.", "##..#", "#...#", "#...#", "####."],
    "c": [".....", ".....", ".###.", "#....", "#....", "#...#", ".###."],
    "d": ["....#", "....#", ".##.#", "#..##", "#...#", "#...#", ".####"],
    "e": [".....", ".....", ".###.", "#...#", "#####", "#....", ".###."],
    "f": ["..##.", ".#..#", ".#...", "###..", ".#...", ".#...", ".#..."],
    "g": [".....", ".####", "#...#", "#...#", ".####", "....#", ".###."],
    "h": ["#....", "#....", "#.##.", "##..#", "#...#", "#...#", "#...#"],
    "i": ["..#..", ".....", ".##..", "..#..", "..#..", "..#..", ".###."],
    "j": ["...#.", ".....", "..##.", "...#.", "...#.", "#..#.", ".##.."],
    "k": ["#....", "#....", "#..#.", "#.#..", "##...", "#.#..", "#..#."],
    "l": [".##..", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."],
    "m": [".....", ".....", "##.#.", "#.#.#", "#.#.#", "#...#", "#...#"],
    "n": [".....", ".....", "#.##.", "##..#", "#...#", "#...#", "#...#"],
    "o": [".....", ".....", ".###.", "#...#", "#...#", "#...#", ".###."],
    "p": [".....", ".....", "####.", "#...#", "####.", "#....", "#...."],
    "q": [".....", ".....", ".##.#", "#..##", ".####", "....#", "....#"],
    "r": [".....", ".....", "#.##.", "##..#", "#....", "#....", "#...."],
    "s": [".....", ".....", ".###.", "#....", ".###.", "....#", "####."],
    "t": [".#...", ".#...", "###..", ".#...", ".#...", ".#..#", "..##."],
    "u": [".....", ".....", "#...#", "#...#", "#...#", "#..##", ".##.#"],
    "v": [".....", ".....", "#...#", "#...#", "#...#", ".#.#.", "..#.."],
    "w": [".....", ".....", "#...#", "#...#", "#.#.#", "#.#.#", ".#.#."],
    "x": [".....", ".....", "#...#", ".#.#.", "..#..", ".#.#.", "#...#"],
    "y": [".....", ".....", "#...#", "#...#", ".####", "....#", ".###."],
    "z": [".....", ".....", "#####", "...#.", "..#..", ".#...", "#####"],
}

GLYPH_SCALE = 3


def glyph_atlas(scale: int = GLYPH_SCALE) -> dict[str, np.ndarray]:
    """Dot-matrix glyphs upscaled by ``scale`` (ink = 1.0)."""
    atlas = {}
    for ch, rows in _GLYPH_ROWS.items():
        bmp = np.array([[1.0 if c == "#" else 0.0 for c in row] for row in rows])
        atlas[ch] = np.kron(bmp, np.ones((scale, scale)))
    return atlas


@dataclass
class SynthConfig:
    chars: str = DEFAULT_CHARS
    words_per_line: tuple[int, int] = (1, 3)
    word_length: tuple[int, int] = (2, 4)
    jitter: float = 0.15
    size: int = 32
    seed: int = 0
    height: int = 32

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for key in ("words_per_line", "word_length"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _jitter_glyph(glyph: np.ndarray, jitter: float, rng: np.random.Generator) -> np.ndarray:
    """Apply a small random shear/scale to one glyph bitmap (nearest neighbour)."""
    if jitter <= 0:
        return glyph
    h, w = glyph.shape
    shear = rng.uniform(-jitter, jitter)
    sx = 1.0 + rng.uniform(-jitter, jitter)
    new_w = max(1, int(round(w * sx)))
    out = np.zeros((h, new_w + int(np.ceil(abs(shear) * h))))
    ys, xs = np.nonzero(np.ones((h, out.shape[1])))
    src_x = (xs - (shear * (h - 1 - ys) if shear > 0 else -shear * ys)) / sx
    src_x = np.round(src_x).astype(int)
    ok = (src_x >= 0) & (src_x < w)
    out[ys[ok], xs[ok]] = glyph[ys[ok], src_x[ok]]
    return out


def render_text(text: str, rng: np.random.Generator, jitter: float = 0.15, height: int = 32) -> np.ndarray:
    """Compose glyphs left to right as ink-high intensities (height × width)."""
    atlas = glyph_atlas()
    gh = next(iter(atlas.values())).shape[0]
    margin = (height - gh) // 2
    if margin < 2:
        raise DataError(f"line height {height} too small for glyph height {gh} plus baseline jitter")
    pieces = []
    for ch in text:
        if ch not in atlas:
            raise DataError(f"no synthetic glyph for {ch!r}")
        glyph = _jitter_glyph(atlas[ch], jitter, rng)
        dy = int(rng.integers(-2, 3))
        col = np.zeros((height, glyph.shape[1]))
        top = margin + dy
        col[top : top + gh] = glyph
        pieces.append(col)
        pieces.append(np.zeros((height, int(rng.integers(1, 5)))))
    return np.concatenate(pieces, axis=1)


def synth_transcripts(cfg: SynthConfig, rng: np.random.Generator) -> list[str]:
    letters = [c for c in cfg.chars if c != " "]
    if not letters:
        raise DataError("synthetic alphabet needs at least one non-space character")
    out = []
    for _ in range(cfg.size):
        n_words = int(rng.integers(cfg.words_per_line[0], cfg.words_per_line[1] + 1))
        words = []
        for _ in range(n_words):
            n = int(rng.integers(cfg.word_length[0], cfg.word_length[1] + 1))
            words.append("".join(letters[int(k)] for k in rng.integers(0, len(letters), size=n)))
        out.append(" ".join(words))
    return out


def synth_generate(cfg: SynthConfig, out_dir) -> Path:
    """Write images/NNNNNN.pgm, manifest.jsonl and synthconfig.json; returns the manifest path.

    Images are stored dark-on-light like scanned pages.
    """
    if cfg.size <= 0:
        raise DataError("synthetic corpus size must be positive")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    texts = synth_transcripts(cfg, rng)
    entries = []
    for i, text in enumerate(texts):
        img = render_text(text, rng, cfg.jitter, cfg.height)
        name = f"images/{i:06d}.pgm"
        write_image(out_dir / name, 1.0 - img)
        entries.append(Entry(name, text))
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, entries)
    (out_dir / "synthconfig.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    return manifest
