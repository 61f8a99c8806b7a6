import { ApiClient } from './api.js';
import type { AnnotationDoc, Keypoint, KeypointKind } from './types.js';

/** One reversible keypoint edit. Undo/redo replay these; an undo of a place
 *  removes the keypoint it added, and vice versa. */
export type Edit =
  | { op: 'place'; kp: Keypoint }
  | { op: 'remove'; index: number; kp: Keypoint }
  | { op: 'move'; index: number; from: Keypoint; to: Keypoint };

export class AnnotationSession {
  readonly imageId: string;
  readonly width: number;
  readonly height: number;
  keypoints: Keypoint[];
  version: number;
  annotator: string;
  imagePath: string;
  private undoStack: Edit[] = [];
  private redoStack: Edit[] = [];
  private savedKeypoints: string;

  constructor(doc: AnnotationDoc) {
    this.imageId = doc.image_id;
    this.width = doc.width;
    this.height = doc.height;
    this.keypoints = doc.keypoints.map((k) => ({ ...k }));
    this.version = doc.version;
    this.annotator = doc.annotator ?? '';
    this.imagePath = doc.image_path ?? '';
    this.savedKeypoints = JSON.stringify(this.keypoints);
  }

  static async load(api: ApiClient, imageId: string): Promise<AnnotationSession> {
    return new AnnotationSession(await api.getAnnotations(imageId));
  }

  get dirty(): boolean {
    return JSON.stringify(this.keypoints) !== this.savedKeypoints;
  }

  get canUndo(): boolean {
    return this.undoStack.length > 0;
  }

  get canRedo(): boolean {
    return this.redoStack.length > 0;
  }

  inBounds(x: number, y: number): boolean {
    return (
      Number.isFinite(x) && Number.isFinite(y) &&
      x >= 0 && x <= this.width - 1 && y >= 0 && y <= this.height - 1
    );
  }

  /** Add a keypoint at image coordinates; rejected (false) out of bounds. */
  place(x: number, y: number, kind: KeypointKind): boolean {
    if (!this.inBounds(x, y)) return false;
    this.apply({ op: 'place', kp: { x, y, kind } });
    return true;
  }

  removeAt(index: number): boolean {
    if (index < 0 || index >= this.keypoints.length) return false;
    this.apply({ op: 'remove', index, kp: { ...this.keypoints[index] } });
    return true;
  }

  move(index: number, x: number, y: number): boolean {
    if (index < 0 || index >= this.keypoints.length || !this.inBounds(x, y)) {
      return false;
    }
    const from = { ...this.keypoints[index] };
    this.apply({ op: 'move', index, from, to: { ...from, x, y } });
    return true;
  }

  /** Index of the nearest keypoint within `radius` image pixels, or -1. */
  nearest(x: number, y: number, radius: number): number {
    let best = -1;
    let bestDist = radius;
    this.keypoints.forEach((k, i) => {
      const d = Math.hypot(k.x - x, k.y - y);
      if (d <= bestDist) {
        best = i;
        bestDist = d;
      }
    });
    return best;
  }

  private apply(edit: Edit): void {
    this.run(edit);
    this.undoStack.push(edit);
    this.redoStack = [];
  }

  private run(edit: Edit): void {
    switch (edit.op) {
      case 'place':
        this.keypoints.push({ ...edit.kp });
        break;
      case 'remove':
        this.keypoints.splice(edit.index, 1);
        break;
      case 'move':
        this.keypoints[edit.index] = { ...edit.to };
        break;
    }
  }

  private invert(edit: Edit): void {
    switch (edit.op) {
      case 'place':
        this.keypoints.pop();
        break;
      case 'remove':
        this.keypoints.splice(edit.index, 0, { ...edit.kp });
        break;
      case 'move':
        this.keypoints[edit.index] = { ...edit.from };
        break;
    }
  }

  undo(): boolean {
    const edit = this.undoStack.pop();
    if (!edit) return false;
    this.invert(edit);
    this.redoStack.push(edit);
    return true;
  }

  redo(): boolean {
    const edit = this.redoStack.pop();
    if (!edit) return false;
    this.run(edit);
    this.undoStack.push(edit);
    return true;
  }

  toDoc(): AnnotationDoc {
    return {
      image_id: this.imageId,
      image_path: this.imagePath,
      width: this.width,
      height: this.height,
      keypoints: this.keypoints.map((k) => ({ ...k })),
      annotator: this.annotator,
      version: this.version,
    };
  }

  /** PUT the current state. On a 409 the session keeps every local edit and
   *  rethrows so the UI can surface the conflict. */
  async save(api: ApiClient): Promise<void> {
    const stored = await api.putAnnotations(this.toDoc());
    this.version = stored.version;
    this.savedKeypoints = JSON.stringify(this.keypoints);
  }
}
