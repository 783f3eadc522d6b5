"""Artifact rendering: PGM heatmap export, side-by-side SVG attention
overlays, boundary-marked captions, and a markdown summary table.

PGM scaling: P2, 8 bit, linear. The array maximum maps to 255 and 0.0
maps to 0; the maximum itself is recorded on the comment line so the
absolute scale survives the export. An all-zero map exports as all
zeros with "max 0".
"""

import json
from pathlib import Path
from xml.etree import ElementTree as ET

import numpy as np

from .errors import ContractError, ReportInputError

METRIC_ORDER = (
    "retrieval_acc",
    "vqa_acc",
    "boundary_f1",
    "emd_mean",
    "cmi",
    "boundary_variance",
    "kl_error_vs_baseline",
    "congruence_acc",
    "transfer_drop",
)

HEATMAP_FORMAT = "dcmt-heatmaps-v1"

CELL = 26  # image cell edge, px
TCELL = 13  # text cell width, px
TROW = 20  # text strip height, px
PAD = 14


def heatmap_to_pgm(arr) -> str:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ContractError(f"PGM export needs a 1-d or 2-d map, got shape {a.shape}")
    if not np.isfinite(a).all() or (a < 0).any():
        raise ContractError("PGM export needs finite nonnegative values")
    vmax = float(a.max())
    if vmax > 0:
        pixels = np.rint(a / vmax * 255).astype(int)
    else:
        pixels = np.zeros(a.shape, dtype=int)
    lines = [
        "P2",
        f"# linear scale: 255 == {vmax:.12g}, 0 == 0.0",
        f"{a.shape[1]} {a.shape[0]}",
        "255",
    ]
    lines.extend(" ".join(str(v) for v in row) for row in pixels)
    return "\n".join(lines) + "\n"


def mark_boundaries(text: str, boundaries) -> str:
    """The caption with a '|' inserted at every segment start."""
    cuts = sorted({int(b) for b in boundaries})
    if any(not 0 < b < len(text) for b in cuts):
        raise ContractError(f"boundaries {cuts} outside (0, {len(text)})")
    pieces = []
    prev = 0
    for b in cuts:
        pieces.append(text[prev:b])
        prev = b
    pieces.append(text[prev:])
    return "|".join(pieces)


def _fmt(value) -> str:
    if value is None:
        return "n/a"
    return f"{value:.4f}"


def markdown_summary(report: dict) -> str:
    lines = ["| metric | value |", "| --- | --- |"]
    for key in METRIC_ORDER:
        lines.append(f"| {key} | {_fmt(report.get(key))} |")
    counts = report.get("error_counts")
    if counts:
        cell = ", ".join(f"{k}={counts[k]}" for k in sorted(counts))
    else:
        cell = "n/a"
    lines.append(f"| error_counts | {cell} |")
    return "\n".join(lines) + "\n"


def _gray(v: float, vmax: float) -> str:
    c = 255 if vmax <= 0 else 255 - int(round(230.0 * min(v / vmax, 1.0)))
    return f"rgb({c},{c},{c})"


def _label(parent, x, y, s, size=11, anchor="start", family="sans-serif"):
    el = ET.SubElement(parent, "text", {
        "x": f"{x:.1f}", "y": f"{y:.1f}",
        "font-size": str(size), "font-family": family, "text-anchor": anchor,
    })
    el.text = s
    return el


def _grid_panel(parent, grid, x0, y0, title):
    g = np.asarray(grid, dtype=np.float64)
    vmax = float(g.max())
    _label(parent, x0, y0 - 5, title)
    for r in range(g.shape[0]):
        for c in range(g.shape[1]):
            ET.SubElement(parent, "rect", {
                "x": f"{x0 + c * CELL:.1f}", "y": f"{y0 + r * CELL:.1f}",
                "width": str(CELL), "height": str(CELL),
                "fill": _gray(g[r, c], vmax), "stroke": "#999", "stroke-width": "0.5",
            })


def _text_strip(parent, values, text, x0, y0, title, boundaries=()):
    v = np.asarray(values, dtype=np.float64)
    vmax = float(v.max())
    _label(parent, x0, y0 - 5, title)
    for t, ch in enumerate(text):
        ET.SubElement(parent, "rect", {
            "x": f"{x0 + t * TCELL:.1f}", "y": f"{y0:.1f}",
            "width": str(TCELL), "height": str(TROW),
            "fill": _gray(v[t], vmax), "stroke": "#bbb", "stroke-width": "0.3",
        })
        _label(parent, x0 + t * TCELL + TCELL / 2, y0 + TROW - 6, ch,
               size=10, anchor="middle", family="monospace")
    for b in boundaries:
        x = x0 + b * TCELL
        ET.SubElement(parent, "line", {
            "x1": f"{x:.1f}", "y1": f"{y0 - 3:.1f}",
            "x2": f"{x:.1f}", "y2": f"{y0 + TROW + 3:.1f}",
            "stroke": "#c22", "stroke-width": "1.5",
        })


def attention_svg(bundle: dict) -> str:
    """One figure per item: model vs reference image heatmaps side by
    side, model vs reference text strips, and the boundary-marked
    caption underneath."""
    caption = bundle["caption"]
    img_m = np.asarray(bundle["image_model"], dtype=np.float64)
    img_r = np.asarray(bundle["image_reference"], dtype=np.float64)
    txt_m = np.asarray(bundle["text_model"], dtype=np.float64)
    txt_r = np.asarray(bundle["text_reference"], dtype=np.float64)
    if img_m.shape != img_r.shape or txt_m.shape != txt_r.shape:
        raise ContractError("model and reference heatmap shapes disagree")
    if txt_m.shape[0] != len(caption):
        raise ContractError("text heatmap length does not match the caption")
    boundaries = bundle.get("boundaries", [])

    g = img_m.shape[0]
    panel = g * CELL
    strip = len(caption) * TCELL
    width = 2 * PAD + max(2 * panel + 3 * PAD, strip)

    root = ET.Element("svg", {"xmlns": "http://www.w3.org/2000/svg"})
    y = PAD + 12
    _label(root, PAD, y,
           f"item {bundle['id']}   emd image {bundle['emd_image']:.4f}   "
           f"emd text {bundle['emd_text']:.4f}", size=13)
    y += 28
    _grid_panel(root, img_m, PAD, y, "image: model")
    _grid_panel(root, img_r, PAD + panel + 3 * PAD, y, "image: reference")
    y += panel + 30
    _text_strip(root, txt_m, caption, PAD, y, "text: model", boundaries)
    y += TROW + 30
    _text_strip(root, txt_r, caption, PAD, y, "text: reference")
    y += TROW + 30
    _label(root, PAD, y, mark_boundaries(caption, boundaries), size=12, family="monospace")
    y += PAD

    root.set("width", str(width))
    root.set("height", str(y))
    root.set("viewBox", f"0 0 {width} {y}")
    return '<?xml version="1.0" encoding="UTF-8"?>\n' + ET.tostring(root, encoding="unicode") + "\n"


def bundles_to_json(bundles: list) -> dict:
    """Serializable form of evaluation heatmap bundles."""
    items = []
    for b in bundles:
        items.append({
            "id": b["id"],
            "caption": b["caption"],
            "boundaries": list(b["boundaries"]),
            "emd_image": b["emd_image"],
            "emd_text": b["emd_text"],
            "image_model": np.asarray(b["image_model"]).tolist(),
            "image_reference": np.asarray(b["image_reference"]).tolist(),
            "text_model": np.asarray(b["text_model"]).tolist(),
            "text_reference": np.asarray(b["text_reference"]).tolist(),
        })
    return {"format": HEATMAP_FORMAT, "items": items}


def render_run(run_dir, out_dir=None) -> list:
    """Render summary.md, boundaries.txt and one attention SVG per
    stored heatmap bundle. Returns the written paths."""
    run = Path(run_dir)
    metrics_path = run / "metrics.json"
    heat_path = run / "heatmaps.json"
    missing = [p for p in (metrics_path, heat_path) if not p.is_file()]
    if missing:
        raise ReportInputError(missing)
    report = json.loads(metrics_path.read_text())
    stored = json.loads(heat_path.read_text())
    if stored.get("format") != HEATMAP_FORMAT:
        raise ContractError(f"unknown heatmap store format {stored.get('format')!r}")

    out = Path(out_dir) if out_dir is not None else run / "report"
    out.mkdir(parents=True, exist_ok=True)
    written = []

    summary = out / "summary.md"
    summary.write_text(markdown_summary(report))
    written.append(summary)

    lines = [
        f"{b['id']}\t{mark_boundaries(b['caption'], b['boundaries'])}"
        for b in stored["items"]
    ]
    overlay = out / "boundaries.txt"
    overlay.write_text("".join(line + "\n" for line in lines))
    written.append(overlay)

    for b in stored["items"]:
        path = out / f"item_{b['id']:04d}_attention.svg"
        path.write_text(attention_svg(b))
        written.append(path)
    return written
