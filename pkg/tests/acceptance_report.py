"""Collects one pass/fail line per acceptance criterion for the terminal summary."""
import contextlib
import time

RESULTS = {}


@contextlib.contextmanager
def criterion(number, title):
    """Record PASS if the block finishes, FAIL (with the reason) otherwise."""
    notes = []
    t0 = time.perf_counter()
    try:
        yield notes
    except BaseException as exc:
        reason = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        RESULTS[number] = (title, False, "; ".join(notes + [reason[:200]]), time.perf_counter() - t0)
        raise
    RESULTS[number] = (title, True, "; ".join(notes), time.perf_counter() - t0)


def lines():
    out = []
    for n in sorted(RESULTS):
        title, ok, detail, secs = RESULTS[n]
        out.append(f"criterion {n:>2} {'PASS' if ok else 'FAIL'} [{secs:7.1f}s] {title}: {detail}")
    return out
