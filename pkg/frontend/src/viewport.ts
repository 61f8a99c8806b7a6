/** Zoom/pan mapping between screen (canvas) and image pixel coordinates:
 *  screen = image * zoom + pan. */

export interface Point {
  x: number;
  y: number;
}

export const MIN_ZOOM = 0.25;
export const MAX_ZOOM = 8;

export class Viewport {
  zoom = 1;
  panX = 0;
  panY = 0;

  screenToImage(p: Point): Point {
    return { x: (p.x - this.panX) / this.zoom, y: (p.y - this.panY) / this.zoom };
  }

  imageToScreen(p: Point): Point {
    return { x: p.x * this.zoom + this.panX, y: p.y * this.zoom + this.panY };
  }

  /** Zoom by a factor keeping the given screen point fixed. */
  zoomAround(factor: number, anchor: Point): void {
    const next = Math.min(MAX_ZOOM, Math.max(MIN_ZOOM, this.zoom * factor));
    const scale = next / this.zoom;
    this.panX = anchor.x - (anchor.x - this.panX) * scale;
    this.panY = anchor.y - (anchor.y - this.panY) * scale;
    this.zoom = next;
  }

  panBy(dx: number, dy: number): void {
    this.panX += dx;
    this.panY += dy;
  }

  reset(): void {
    this.zoom = 1;
    this.panX = 0;
    this.panY = 0;
  }
}
