"""Builds the bundled training and held-out corpora from locally installed
Python documentation (pydoc topics plus standard-library docstrings).

Output: one paragraph per blank-line-separated block, ASCII only.
Usage: python3 tools/make_corpus.py data/
"""

import ast
import pathlib
import re
import sys
import sysconfig

TRAIN_BYTES = 1_000_000
HELDOUT_BYTES = 100_000


def clean_paragraphs(text):
    text = text.encode("ascii", "ignore").decode("ascii")
    text = text.replace("\r", "")
    for block in re.split(r"\n\s*\n", text):
        lines = [ln.rstrip() for ln in block.split("\n") if ln.strip()]
        if not lines:
            continue
        if all(set(ln.strip()) <= set("*=-~^") for ln in lines):
            continue
        para = " ".join(ln.strip() for ln in lines)
        para = re.sub(r"\s+", " ", para).strip()
        letters = sum(c.isalpha() for c in para)
        if len(para) < 40 or letters < 0.6 * len(para):
            continue
        yield para


def pydoc_paragraphs():
    from pydoc_data.topics import topics
    for key in sorted(topics):
        yield from clean_paragraphs(topics[key])


def docstring_paragraphs():
    stdlib = pathlib.Path(sysconfig.get_paths()["stdlib"])
    for path in sorted(stdlib.rglob("*.py")):
        if any(part in ("test", "tests", "idle_test", "site-packages", "dist-packages") for part in path.parts):
            continue
        try:
            tree = ast.parse(path.read_text(encoding="utf-8", errors="ignore"))
        except SyntaxError:
            continue
        for node in ast.walk(tree):
            if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
                doc = ast.get_docstring(node)
                if doc:
                    yield from clean_paragraphs(doc)


def main(out_dir):
    out = pathlib.Path(out_dir)
    seen = set()
    paras = []
    for p in list(pydoc_paragraphs()) + list(docstring_paragraphs()):
        if p not in seen:
            seen.add(p)
            paras.append(p)
    # every tenth paragraph goes to the held-out split
    train, heldout = [], []
    size_t = size_h = 0
    for i, p in enumerate(paras):
        if i % 10 == 9:
            if size_h < HELDOUT_BYTES:
                heldout.append(p)
                size_h += len(p) + 2
        elif size_t < TRAIN_BYTES:
            train.append(p)
            size_t += len(p) + 2
    (out / "corpus.txt").write_text("\n\n".join(train) + "\n")
    (out / "heldout.txt").write_text("\n\n".join(heldout) + "\n")
    print(f"paragraphs={len(paras)} train={size_t} heldout={size_h}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data")
