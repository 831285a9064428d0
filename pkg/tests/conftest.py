import numpy as np

FD_STEP = 1e-5


def central_difference(f, psi, h=FD_STEP):
    psi = np.asarray(psi, dtype=np.float64)
    out = np.empty_like(psi)
    for i in range(len(psi)):
        up, down = psi.copy(), psi.copy()
        up[i] += h
        down[i] -= h
        out[i] = (f(up) - f(down)) / (2 * h)
    return out


def max_relative_error(analytic, numeric):
    """Entrywise relative error with a floor tied to the gradient's overall scale.

    Entries that are zero analytically differ from their difference quotient
    only by round-off, so the denominator never drops below 1e-4 of the
    largest entry (or 1e-4 when everything is small).
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    floor = 1e-4 * max(1.0, float(np.max(np.abs(a), initial=0.0)))
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor), initial=0.0))


# --- acceptance summary -------------------------------------------------------

_criteria: dict[str, dict] = {}
_details: dict[str, str] = {}


def record_detail(key, text):
    _details[key] = text


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call" and not (call.when == "setup" and call.excinfo):
        return
    key, title = marker.args
    entry = _criteria.setdefault(key, {"title": title, "ok": True, "seconds": 0.0})
    entry["ok"] = entry["ok"] and call.excinfo is None
    entry["seconds"] += call.duration


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_criteria, key=lambda k: (int(k.rstrip("abcdefghijklmnopqrstuvwxyz")), k)):
        e = _criteria[key]
        status = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {key}: {status}  {e['title']}  ({e['seconds']:.2f} s)")
        if key in _details:
            terminalreporter.write_line(f"    {_details[key]}")
