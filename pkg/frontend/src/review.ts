import { ApiClient } from './api.js';
import type { MatchDump, MatchStatus } from './types.js';

/** Review state for one pair's match list. Only accepted matches are ever
 *  exported as control points. */
export class MatchReviewSession {
  readonly pairId: string;
  readonly dump: MatchDump;
  statuses: MatchStatus[];
  cursor = 0;
  overlayVisible = true;

  constructor(dump: MatchDump) {
    this.pairId = dump.pair_id;
    this.dump = dump;
    this.statuses = dump.matches.map((_, i) => {
      const r = dump.review?.[i];
      return r === true ? 'accepted' : r === false ? 'rejected' : 'unreviewed';
    });
  }

  static async load(api: ApiClient, pairId: string): Promise<MatchReviewSession> {
    return new MatchReviewSession(await api.getMatches(pairId));
  }

  get matchCount(): number {
    return this.dump.matches.length;
  }

  setStatus(index: number, status: MatchStatus): void {
    if (index < 0 || index >= this.statuses.length) return;
    this.statuses[index] = status;
  }

  accept(index: number): void {
    this.setStatus(index, 'accepted');
  }

  reject(index: number): void {
    this.setStatus(index, 'rejected');
  }

  acceptAll(): void {
    this.statuses = this.statuses.map(() => 'accepted');
  }

  rejectAll(): void {
    this.statuses = this.statuses.map(() => 'rejected');
  }

  next(): void {
    if (this.matchCount) this.cursor = (this.cursor + 1) % this.matchCount;
  }

  prev(): void {
    if (this.matchCount) {
      this.cursor = (this.cursor - 1 + this.matchCount) % this.matchCount;
    }
  }

  toggleOverlay(): void {
    this.overlayVisible = !this.overlayVisible;
  }

  acceptedFlags(): (boolean | null)[] {
    return this.statuses.map((s) =>
      s === 'accepted' ? true : s === 'rejected' ? false : null);
  }

  /** Accepted matches in the control-point text format:
   *  one `x_query y_query x_ref y_ref` line per match. */
  exportControls(): string {
    const lines: string[] = [];
    this.dump.matches.forEach(([iq, ir], m) => {
      if (this.statuses[m] !== 'accepted') return;
      const [qx, qy] = this.dump.query_keypoints[iq];
      const [rx, ry] = this.dump.ref_keypoints[ir];
      lines.push(`${qx} ${qy} ${rx} ${ry}`);
    });
    return lines.length ? lines.join('\n') + '\n' : '';
  }

  async saveReview(api: ApiClient): Promise<void> {
    await api.putReview(this.pairId, this.acceptedFlags());
  }
}
