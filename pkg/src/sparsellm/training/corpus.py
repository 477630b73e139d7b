"""Procedural text sources bundled with the package.

Each source emits text in a recognisable house style (prose, markup, code,
Q&A, ...) from a seeded generator, so corpora are reproducible without any
download. Tokens are raw bytes.
"""

from __future__ import annotations

import numpy as np

from ..tensors import Rng

_NOUNS = ("model", "layer", "weight", "signal", "river", "city", "garden", "market", "engine", "theory",
          "network", "village", "matrix", "process", "student", "library", "window", "planet", "protein",
          "sequence", "kernel", "harbor", "forest", "teacher", "circuit", "language", "mountain", "letter")
_VERBS = ("reduces", "builds", "follows", "changes", "improves", "measures", "contains", "drives",
          "supports", "predicts", "carries", "divides", "connects", "protects", "explains", "returns")
_ADJS = ("small", "sparse", "quiet", "bright", "dense", "early", "linear", "large", "simple", "stable",
         "ancient", "random", "narrow", "warm", "formal", "northern", "robust", "hidden")
_NAMES = ("Ada", "Boris", "Chen", "Dana", "Elif", "Farid", "Grace", "Hugo", "Ines", "Jonas", "Kira", "Luis")
_PLACES = ("Lisbon", "Osaka", "Quito", "Tallinn", "Nairobi", "Perth", "Bergen", "Cusco", "Hanoi", "Porto")
_IDENTS = ("value", "items", "count", "total", "result", "index", "buffer", "node", "key", "data", "size", "acc")
_TAGS = ("div", "span", "p", "li", "a", "section", "header", "td")


def _pick(rng: Rng, seq):
    return seq[int(rng.integers(0, len(seq)))]


def _sentence(rng: Rng) -> str:
    s = f"the {_pick(rng, _ADJS)} {_pick(rng, _NOUNS)} {_pick(rng, _VERBS)} the {_pick(rng, _NOUNS)}"
    if rng.uniform(()) < 0.4:
        s += f" of {_pick(rng, _PLACES)}"
    return s[0].upper() + s[1:] + "."


def _arxiv(rng: Rng) -> str:
    a, b = _pick(rng, "xyzwk"), _pick(rng, "nmpq")
    n = int(rng.integers(2, 9))
    return (f"\\begin{{theorem}} Let ${a}_{b} \\in \\mathbb{{R}}^{n}$. Then "
            f"$\\sum_{{{b}=1}}^{{{n}}} {a}_{b}^2 \\leq {n} \\max_{b} |{a}_{b}|^2$. \\end{{theorem}}\n"
            f"{_sentence(rng)} We show that the {_pick(rng, _ADJS)} {_pick(rng, _NOUNS)} converges.\n")


def _books(rng: Rng) -> str:
    who, where = _pick(rng, _NAMES), _pick(rng, _PLACES)
    return (f"{who} walked through {where} at dawn. \"{_sentence(rng)}\" {who} said quietly. "
            f"{_sentence(rng)} {_sentence(rng)}\n")


def _c4(rng: Rng) -> str:
    n = int(rng.integers(3, 12))
    return (f"Top {n} reasons to visit {_pick(rng, _PLACES)} this year! {_sentence(rng)} "
            f"Click here to learn more about the {_pick(rng, _ADJS)} {_pick(rng, _NOUNS)}.\n")


def _commoncrawl(rng: Rng) -> str:
    tag = _pick(rng, _TAGS)
    return (f"<{tag} class=\"{_pick(rng, _ADJS)}\">{_sentence(rng)}</{tag}> "
            f"<a href=\"/{_pick(rng, _NOUNS)}/{int(rng.integers(1, 999))}\">more</a>\n")


def _github(rng: Rng) -> str:
    f, v = _pick(rng, _IDENTS), _pick(rng, _IDENTS)
    n = int(rng.integers(1, 64))
    return (f"static int {f}_{v}(int *{v}, int n) {{\n  int {f} = 0;\n"
            f"  for (int i = 0; i < n; i++) {{ {f} += {v}[i] * {n}; }}\n  return {f};\n}}\n")


def _stackexchange(rng: Rng) -> str:
    return (f"Q: How does the {_pick(rng, _ADJS)} {_pick(rng, _NOUNS)} work in {_pick(rng, _PLACES)}?\n"
            f"A: {_sentence(rng)} {_sentence(rng)} Hope this helps.\n")


def _wikipedia(rng: Rng) -> str:
    place = _pick(rng, _PLACES)
    year = int(rng.integers(1700, 2020))
    return (f"== {place} ==\n{place} is a {_pick(rng, _ADJS)} city founded in {year}. "
            f"{_sentence(rng)} Its population was {int(rng.integers(1000, 900000))} in {year + 50}.\n")


def _python(rng: Rng) -> str:
    f, v = _pick(rng, _IDENTS), _pick(rng, _IDENTS)
    k = int(rng.integers(1, 10))
    return (f"def {f}_{v}({v}):\n    {f} = 0\n    for x in {v}:\n        {f} += x * {k}\n"
            f"    return {f}\n\n")


GENERATORS = {
    "ArXiv": _arxiv,
    "Books": _books,
    "C4": _c4,
    "Commoncrawl": _commoncrawl,
    "Github": _github,
    "StackExchange": _stackexchange,
    "Wikipedia": _wikipedia,
    "The Stack (Python)": _python,
}


def generate_text(source: str, n_bytes: int, seed: int) -> bytes:
    """At least ``n_bytes`` of text in the style of ``source``."""
    gen = GENERATORS[source]
    rng = Rng(seed).substream(f"corpus:{source}")
    parts, size = [], 0
    while size < n_bytes:
        chunk = gen(rng).encode("ascii")
        parts.append(chunk)
        size += len(chunk)
    return b"".join(parts)


def to_tokens(text: bytes) -> np.ndarray:
    return np.frombuffer(text, dtype=np.uint8).astype(np.int64)


# ---------------------------------------------------------------------------
# downstream fine-tuning task
# ---------------------------------------------------------------------------

_ITEMS = ("apples", "books", "coins", "stamps", "shells", "pencils", "marbles", "cards")


def arithmetic_example(rng: Rng) -> str:
    """A two-step word problem with its worked answer."""
    who = _pick(rng, _NAMES)
    item = _pick(rng, _ITEMS)
    a, b, c = (int(v) for v in rng.integers(2, 20, size=3))
    return (f"Q: {who} has {a} {item}, finds {b} more and gives away {c}. How many {item} now?\n"
            f"A: {a}+{b}={a + b}. {a + b}-{c}={a + b - c}. The answer is {a + b - c}.\n")


def task_text(n_examples: int, seed: int, split: str) -> bytes:
    rng = Rng(seed).substream(f"task:{split}")
    return "".join(arithmetic_example(rng) for _ in range(n_examples)).encode("ascii")
