import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import pytest

from cmlm.embed import SgnsConfig
from cmlm.pipeline import FIXTURE_MERGES, FIXTURE_SPEC, build_embeddings, build_mapping, build_static, build_tables, build_text
from cmlm.textpipe import CipherSpec


SMALL_SPEC = CipherSpec(base_vocab_size=300, num_sentences=2000, num_eval_sentences=30, seed=77)


@pytest.fixture(scope="session")
def small_text():
    return build_text(SMALL_SPEC, num_merges=400, top_m=300)


@pytest.fixture(scope="session")
def small_stack(small_text):
    """Tokens, embeddings, mapping, tables and static vectors of a 2k-sentence cipher pair."""
    embs = build_embeddings(small_text, SgnsConfig(dim=32, epochs=3))
    m = build_mapping(small_text, embs, rounds=5, top_f=300)
    tables = build_tables(small_text, m, k=5)
    static = build_static(small_text.vocab, m)
    return small_text, embs, m, tables, static


@pytest.fixture(scope="session")
def fixture_text():
    return build_text(FIXTURE_SPEC, num_merges=FIXTURE_MERGES)


@dataclass
class FixtureStack:
    text: object
    embs: dict
    mapping: object
    tables: dict
    static: object
    seconds: float


@pytest.fixture(scope="session")
def fixture_stack():
    """The frozen 20k-sentence cipher fixture taken through embeddings, mapping and tables."""
    t0 = time.perf_counter()
    text = build_text(FIXTURE_SPEC, num_merges=FIXTURE_MERGES)
    embs = build_embeddings(text)
    m = build_mapping(text, embs)
    tables = build_tables(text, m, k=5)
    static = build_static(text.vocab, m)
    return FixtureStack(text, embs, m, tables, static, time.perf_counter() - t0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- acceptance reporting ---------------------------------------------------

CRITERIA = {}


class _Record:
    def __init__(self):
        self.detail = ""


@pytest.fixture
def criterion():
    @contextmanager
    def run(n, title):
        rec = _Record()
        t0 = time.perf_counter()
        try:
            yield rec
        except BaseException as e:
            msg = str(e).splitlines()[0] if str(e) else type(e).__name__
            CRITERIA[n] = (False, title, f"{rec.detail} [{msg}]".strip(), time.perf_counter() - t0)
            raise
        else:
            CRITERIA[n] = (True, title, rec.detail, time.perf_counter() - t0)
        finally:
            ok, _, detail, secs = CRITERIA[n]
            print(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {title}: {detail} ({secs:.1f}s)")

    return run


def pytest_terminal_summary(terminalreporter):
    ran = any("test_acceptance" in r.nodeid for rs in terminalreporter.stats.values() for r in rs
              if hasattr(r, "nodeid"))
    if not ran:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, 10):
        if n in CRITERIA:
            ok, title, detail, secs = CRITERIA[n]
            terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {title}: {detail} ({secs:.1f}s)")
        else:
            terminalreporter.write_line(f"criterion {n}: FAIL - not run")
