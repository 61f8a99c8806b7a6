"""SVG/CSV emission for the keypoint-count histogram and side-by-side match
drawings. SVG is built with ElementTree so output is always well-formed XML,
and a raw CSV is emitted alongside every plot for numeric assertions."""

from __future__ import annotations

import base64
import io
import xml.etree.ElementTree as ET

import numpy as np
from PIL import Image


def _svg_root(width: int, height: int) -> ET.Element:
    return ET.Element("svg", {
        "xmlns": "http://www.w3.org/2000/svg",
        "width": str(width),
        "height": str(height),
        "viewBox": f"0 0 {width} {height}",
    })


def _text(parent, x, y, s, size=11, anchor="middle"):
    el = ET.SubElement(parent, "text", {
        "x": f"{x:.1f}", "y": f"{y:.1f}", "font-size": str(size),
        "text-anchor": anchor, "font-family": "sans-serif", "fill": "#333",
    })
    el.text = s
    return el


def keypoint_histogram_svg(counts: list[int], bins: int = 10) -> str:
    """Histogram of per-image keypoint counts."""
    if not counts:
        raise ValueError("no keypoint counts to plot")
    values = np.asarray(counts, dtype=np.float64)
    hist, edges = np.histogram(values, bins=bins)
    width, height = 520, 320
    ml, mr, mt, mb = 50, 15, 25, 45
    plot_w, plot_h = width - ml - mr, height - mt - mb
    top = max(int(hist.max()), 1)

    root = _svg_root(width, height)
    _text(root, width / 2, 16, "Keypoints per image", size=13)
    bar_w = plot_w / len(hist)
    for i, h in enumerate(hist):
        bh = plot_h * h / top
        ET.SubElement(root, "rect", {
            "x": f"{ml + i * bar_w + 1:.1f}",
            "y": f"{mt + plot_h - bh:.1f}",
            "width": f"{bar_w - 2:.1f}",
            "height": f"{bh:.1f}",
            "fill": "#4878a8",
        })
        _text(root, ml + (i + 0.5) * bar_w, height - mb + 14,
              f"{edges[i]:.0f}-{edges[i + 1]:.0f}", size=9)
    for frac in (0.0, 0.5, 1.0):
        y = mt + plot_h * (1 - frac)
        ET.SubElement(root, "line", {
            "x1": str(ml), "y1": f"{y:.1f}", "x2": str(width - mr), "y2": f"{y:.1f}",
            "stroke": "#ccc", "stroke-width": "0.5"})
        _text(root, ml - 6, y + 3, f"{top * frac:.0f}", size=9, anchor="end")
    _text(root, width / 2, height - 8, "keypoint count", size=10)
    return ET.tostring(root, encoding="unicode")


def keypoint_counts_csv(items: list[tuple[str, int]]) -> str:
    lines = ["image_id,keypoint_count"]
    lines += [f"{image_id},{count}" for image_id, count in items]
    return "\n".join(lines) + "\n"


def _embed_image(parent, gray: np.ndarray, x: float, y: float) -> None:
    arr = np.clip(np.rint(np.asarray(gray, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    uri = "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")
    ET.SubElement(parent, "image", {
        "x": str(x), "y": str(y),
        "width": str(arr.shape[1]), "height": str(arr.shape[0]),
        "href": uri,
    })


def matches_svg(query_img: np.ndarray, ref_img: np.ndarray,
                query_xy: np.ndarray, ref_xy: np.ndarray,
                pairs: list[tuple[int, int]],
                statuses: list[str] | None = None) -> str:
    """Side-by-side pair with one line per match.

    `statuses` (per match: accepted / rejected / unreviewed) only affects
    line color.
    """
    gap = 12
    qh, qw = query_img.shape
    rh, rw = ref_img.shape
    width = qw + gap + rw
    height = max(qh, rh)
    root = _svg_root(width, height)
    _embed_image(root, query_img, 0, 0)
    _embed_image(root, ref_img, qw + gap, 0)
    colors = {"accepted": "#37b24d", "rejected": "#e03131", "unreviewed": "#fab005"}
    for m, (iq, ir) in enumerate(pairs):
        x1, y1 = query_xy[iq]
        x2, y2 = ref_xy[ir]
        status = statuses[m] if statuses else "unreviewed"
        ET.SubElement(root, "line", {
            "x1": f"{x1:.2f}", "y1": f"{y1:.2f}",
            "x2": f"{x2 + qw + gap:.2f}", "y2": f"{y2:.2f}",
            "stroke": colors.get(status, "#fab005"), "stroke-width": "0.8",
        })
        for (x, y) in ((x1, y1), (x2 + qw + gap, y2)):
            ET.SubElement(root, "circle", {
                "cx": f"{x:.2f}", "cy": f"{y:.2f}", "r": "1.6",
                "fill": "none", "stroke": "#66d9ef", "stroke-width": "0.8"})
    return ET.tostring(root, encoding="unicode")


def matches_csv(query_xy: np.ndarray, ref_xy: np.ndarray,
                pairs: list[tuple[int, int]], distances=None) -> str:
    lines = ["x_query,y_query,x_ref,y_ref,distance"]
    for m, (iq, ir) in enumerate(pairs):
        d = "" if distances is None else f"{float(distances[m]):.6f}"
        lines.append(f"{query_xy[iq][0]:.3f},{query_xy[iq][1]:.3f},"
                     f"{ref_xy[ir][0]:.3f},{ref_xy[ir][1]:.3f},{d}")
    return "\n".join(lines) + "\n"
