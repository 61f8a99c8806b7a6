import { ApiClient, VersionConflictError } from './api.js';
import { MatchReviewSession } from './review.js';
import { AnnotationSession } from './session.js';
import type { ImageInfo, KeypointKind, PairInfo } from './types.js';
import { Viewport } from './viewport.js';

const KIND_ORDER: KeypointKind[] = ['bifurcation', 'crossover', 'intersection'];
const KIND_COLOR: Record<KeypointKind, string> = {
  bifurcation: '#51cf66',
  crossover: '#ffd43b',
  intersection: '#74c0fc',
};
const STATUS_COLOR = { accepted: '#37b24d', rejected: '#e03131', unreviewed: '#fab005' };

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function setBanner(text: string, isError = false): void {
  const banner = el<HTMLDivElement>('banner');
  banner.textContent = text;
  banner.className = isError ? 'banner error' : 'banner';
}

/** Keypoint annotation view: canvas + click-to-place + undo/redo + save. */
class AnnotatorView {
  private viewport = new Viewport();
  private session: AnnotationSession | null = null;
  private image = new Image();
  private kind: KeypointKind = 'bifurcation';
  private dragging = false;
  private last = { x: 0, y: 0 };

  constructor(private api: ApiClient, private canvas: HTMLCanvasElement) {
    canvas.addEventListener('mousedown', (e) => this.onDown(e));
    canvas.addEventListener('mousemove', (e) => this.onMove(e));
    window.addEventListener('mouseup', () => (this.dragging = false));
    canvas.addEventListener('wheel', (e) => this.onWheel(e), { passive: false });
    canvas.addEventListener('contextmenu', (e) => e.preventDefault());
  }

  async open(info: ImageInfo): Promise<void> {
    this.session = await AnnotationSession.load(this.api, info.id);
    this.viewport.reset();
    await new Promise<void>((resolve, reject) => {
      this.image.onload = () => resolve();
      this.image.onerror = () => reject(new Error(`cannot load image ${info.id}`));
      this.image.src = this.api.imageUrl(info.id);
    });
    setBanner(`editing ${info.id} (v${this.session.version}); ` +
      `keys: 1/2/3 kind, u undo, r redo, s save, right-drag pan, wheel zoom`);
    this.draw();
  }

  get active(): AnnotationSession | null {
    return this.session;
  }

  setKind(kind: KeypointKind): void {
    this.kind = kind;
    setBanner(`placing: ${kind}`);
  }

  private canvasPoint(e: MouseEvent): { x: number; y: number } {
    const rect = this.canvas.getBoundingClientRect();
    return { x: e.clientX - rect.left, y: e.clientY - rect.top };
  }

  private onDown(e: MouseEvent): void {
    if (!this.session) return;
    const sp = this.canvasPoint(e);
    if (e.button === 2 || e.shiftKey) {
      this.dragging = true;
      this.last = sp;
      return;
    }
    const ip = this.viewport.screenToImage(sp);
    if (e.altKey) {
      const idx = this.session.nearest(ip.x, ip.y, 6 / this.viewport.zoom);
      if (idx >= 0) this.session.removeAt(idx);
    } else if (!this.session.place(ip.x, ip.y, this.kind)) {
      setBanner(`(${ip.x.toFixed(1)}, ${ip.y.toFixed(1)}) is outside the image`, true);
      return;
    }
    this.draw();
  }

  private onMove(e: MouseEvent): void {
    if (!this.dragging) return;
    const sp = this.canvasPoint(e);
    this.viewport.panBy(sp.x - this.last.x, sp.y - this.last.y);
    this.last = sp;
    this.draw();
  }

  private onWheel(e: WheelEvent): void {
    e.preventDefault();
    this.viewport.zoomAround(e.deltaY < 0 ? 1.2 : 1 / 1.2, this.canvasPoint(e));
    this.draw();
  }

  undo(): void {
    if (this.session?.undo()) this.draw();
  }

  redo(): void {
    if (this.session?.redo()) this.draw();
  }

  async save(): Promise<void> {
    if (!this.session) return;
    try {
      await this.session.save(this.api);
      setBanner(`saved ${this.session.imageId} as v${this.session.version}`);
    } catch (err) {
      if (err instanceof VersionConflictError) {
        setBanner('save conflict: the server has a newer version; your edits are ' +
          'kept locally. Reload the image list to inspect.', true);
      } else {
        setBanner(`save failed: ${(err as Error).message}`, true);
      }
    }
  }

  draw(): void {
    const ctx = this.canvas.getContext('2d');
    if (!ctx || !this.session) return;
    ctx.save();
    ctx.fillStyle = '#14171c';
    ctx.fillRect(0, 0, this.canvas.width, this.canvas.height);
    const filters = currentFilters();
    ctx.filter = `brightness(${filters.brightness}%) contrast(${filters.contrast}%)`;
    ctx.imageSmoothingEnabled = this.viewport.zoom < 2;
    ctx.setTransform(this.viewport.zoom, 0, 0, this.viewport.zoom,
      this.viewport.panX, this.viewport.panY);
    ctx.drawImage(this.image, 0, 0);
    ctx.restore();

    for (const k of this.session.keypoints) {
      const sp = this.viewport.imageToScreen(k);
      ctx.strokeStyle = KIND_COLOR[k.kind];
      ctx.lineWidth = 1.5;
      ctx.beginPath();
      if (k.kind === 'bifurcation') {
        ctx.arc(sp.x, sp.y, 5, 0, Math.PI * 2);
      } else if (k.kind === 'crossover') {
        ctx.moveTo(sp.x - 4, sp.y - 4);
        ctx.lineTo(sp.x + 4, sp.y + 4);
        ctx.moveTo(sp.x - 4, sp.y + 4);
        ctx.lineTo(sp.x + 4, sp.y - 4);
      } else {
        ctx.rect(sp.x - 4, sp.y - 4, 8, 8);
      }
      ctx.stroke();
    }
    el<HTMLSpanElement>('status').textContent = this.session
      ? `${this.session.keypoints.length} keypoints` +
        (this.session.dirty ? ' (unsaved)' : '')
      : '';
  }
}

/** Side-by-side match review with keyboard-first accept/reject. */
class ReviewView {
  private session: MatchReviewSession | null = null;
  private queryImg = new Image();
  private refImg = new Image();

  constructor(private api: ApiClient, private canvas: HTMLCanvasElement) {}

  async open(pair: PairInfo): Promise<void> {
    this.session = await MatchReviewSession.load(this.api, pair.id);
    const load = (img: HTMLImageElement, rel: string) =>
      new Promise<void>((resolve, reject) => {
        img.onload = () => resolve();
        img.onerror = () => reject(new Error(`cannot load ${rel}`));
        // dumps may carry absolute paths; the served id is the basename
        const id = (rel.split('/').pop() ?? rel).replace(/\.png$/, '');
        img.src = this.api.imageUrl(id);
      });
    await Promise.all([load(this.queryImg, this.session.dump.query),
      load(this.refImg, this.session.dump.ref)]);
    setBanner(`reviewing ${pair.id}: j/k move, a accept, x reject, A/X all, ` +
      'o overlay, v save review, e export controls');
    this.draw();
  }

  get active(): MatchReviewSession | null {
    return this.session;
  }

  key(k: string): void {
    const s = this.session;
    if (!s) return;
    if (k === 'j') s.next();
    else if (k === 'k') s.prev();
    else if (k === 'a') { s.accept(s.cursor); s.next(); }
    else if (k === 'x') { s.reject(s.cursor); s.next(); }
    else if (k === 'A') s.acceptAll();
    else if (k === 'X') s.rejectAll();
    else if (k === 'o') s.toggleOverlay();
    else return;
    this.draw();
  }

  async saveReview(): Promise<void> {
    if (!this.session) return;
    await this.session.saveReview(this.api);
    setBanner(`review saved for ${this.session.pairId}`);
  }

  async exportControls(): Promise<void> {
    if (!this.session) return;
    await this.session.saveReview(this.api);
    const text = await this.api.exportControls(this.session.pairId);
    const blob = new Blob([text], { type: 'text/plain' });
    const a = document.createElement('a');
    a.href = URL.createObjectURL(blob);
    a.download = `${this.session.pairId}_controls.txt`;
    a.click();
    URL.revokeObjectURL(a.href);
    setBanner(`exported ${text.trim() ? text.trim().split('\n').length : 0} control points`);
  }

  draw(): void {
    const ctx = this.canvas.getContext('2d');
    const s = this.session;
    if (!ctx || !s) return;
    const gap = 14;
    ctx.fillStyle = '#14171c';
    ctx.fillRect(0, 0, this.canvas.width, this.canvas.height);
    ctx.drawImage(this.queryImg, 0, 0);
    ctx.drawImage(this.refImg, this.queryImg.width + gap, 0);
    const xoff = this.queryImg.width + gap;
    if (s.overlayVisible) {
      s.dump.matches.forEach(([iq, ir], m) => {
        const [qx, qy] = s.dump.query_keypoints[iq];
        const [rx, ry] = s.dump.ref_keypoints[ir];
        ctx.strokeStyle = STATUS_COLOR[s.statuses[m]];
        ctx.lineWidth = m === s.cursor ? 2.5 : 0.8;
        ctx.beginPath();
        ctx.moveTo(qx, qy);
        ctx.lineTo(rx + xoff, ry);
        ctx.stroke();
      });
    }
    const counts = s.statuses.reduce(
      (acc, st) => ({ ...acc, [st]: (acc as Record<string, number>)[st] + 1 }),
      { accepted: 0, rejected: 0, unreviewed: 0 });
    el<HTMLSpanElement>('status').textContent =
      `match ${s.matchCount ? s.cursor + 1 : 0}/${s.matchCount} — ` +
      `${counts.accepted} accepted, ${counts.rejected} rejected, ` +
      `${counts.unreviewed} unreviewed` +
      (s.dump.verdict ? ` — registration: ${s.dump.verdict}` : '');
  }
}

function currentFilters(): { brightness: number; contrast: number } {
  return {
    brightness: Number(el<HTMLInputElement>('brightness').value),
    contrast: Number(el<HTMLInputElement>('contrast').value),
  };
}

export async function startApp(): Promise<void> {
  const api = new ApiClient();
  const canvas = el<HTMLCanvasElement>('view');
  const annotator = new AnnotatorView(api, canvas);
  const review = new ReviewView(api, canvas);
  let mode: 'annotate' | 'review' = 'annotate';

  const imageList = el<HTMLSelectElement>('images');
  const pairList = el<HTMLSelectElement>('pairs');
  const images = await api.listImages();
  for (const info of images) {
    const opt = document.createElement('option');
    opt.value = info.id;
    opt.textContent = `${info.id}${info.annotated ? ' *' : ''}`;
    imageList.appendChild(opt);
  }
  const pairs = await api.listPairs();
  for (const p of pairs.filter((p) => p.has_matches)) {
    const opt = document.createElement('option');
    opt.value = p.id;
    opt.textContent = p.id;
    pairList.appendChild(opt);
  }

  imageList.addEventListener('change', async () => {
    mode = 'annotate';
    const info = images.find((i) => i.id === imageList.value);
    if (info) await annotator.open(info);
  });
  pairList.addEventListener('change', async () => {
    mode = 'review';
    const p = pairs.find((q) => q.id === pairList.value);
    if (p) await review.open(p);
  });
  for (const id of ['brightness', 'contrast']) {
    el<HTMLInputElement>(id).addEventListener('input', () => {
      if (mode === 'annotate') annotator.draw();
    });
  }

  window.addEventListener('keydown', async (e) => {
    if ((e.target as HTMLElement).tagName === 'SELECT') return;
    if (mode === 'annotate') {
      if (e.key === 'u') annotator.undo();
      else if (e.key === 'r') annotator.redo();
      else if (e.key === 's') await annotator.save();
      else if (e.key >= '1' && e.key <= '3') {
        annotator.setKind(KIND_ORDER[Number(e.key) - 1]);
      }
    } else {
      if (e.key === 'v') await review.saveReview();
      else if (e.key === 'e') await review.exportControls();
      else review.key(e.key);
    }
  });

  if (images.length) {
    imageList.value = images[0].id;
    await annotator.open(images[0]);
  } else {
    setBanner('no images in the data directory');
  }
}
