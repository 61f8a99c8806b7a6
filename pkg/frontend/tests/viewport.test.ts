import { describe, expect, it } from 'vitest';

import { Viewport, MAX_ZOOM, MIN_ZOOM } from '../src/viewport.js';

describe('viewport transform', () => {
  it('inverts a click at screen center with zoom 2 and pan (10,10)', () => {
    const vp = new Viewport();
    vp.zoom = 2;
    vp.panX = 10;
    vp.panY = 10;
    const center = { x: 600, y: 380 };
    const img = vp.screenToImage(center);
    expect(img.x).toBeCloseTo((center.x - 10) / 2, 10);
    expect(img.y).toBeCloseTo((center.y - 10) / 2, 10);
  });

  it('round-trips screen->image->screen within 0.5 px at zooms 0.25x..8x', () => {
    for (const zoom of [0.25, 0.5, 1, 2, 3.7, 8]) {
      const vp = new Viewport();
      vp.zoom = zoom;
      vp.panX = -37.25;
      vp.panY = 411.5;
      for (const p of [{ x: 0, y: 0 }, { x: 123.4, y: 567.8 }, { x: 999, y: 1 }]) {
        const back = vp.imageToScreen(vp.screenToImage(p));
        expect(Math.abs(back.x - p.x)).toBeLessThanOrEqual(0.5);
        expect(Math.abs(back.y - p.y)).toBeLessThanOrEqual(0.5);
      }
    }
  });

  it('zoomAround keeps the anchor point fixed', () => {
    const vp = new Viewport();
    vp.panX = 20;
    vp.panY = -5;
    const anchor = { x: 300, y: 200 };
    const before = vp.screenToImage(anchor);
    vp.zoomAround(2, anchor);
    const after = vp.screenToImage(anchor);
    expect(after.x).toBeCloseTo(before.x, 9);
    expect(after.y).toBeCloseTo(before.y, 9);
  });

  it('clamps zoom to the supported range', () => {
    const vp = new Viewport();
    vp.zoomAround(1e-9, { x: 0, y: 0 });
    expect(vp.zoom).toBe(MIN_ZOOM);
    vp.zoomAround(1e9, { x: 0, y: 0 });
    expect(vp.zoom).toBe(MAX_ZOOM);
  });
});
