import type { AnnotationDoc, ImageInfo, MatchDump, PairInfo } from './types.js';

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

/** PUT /api/annotations rejected because the server holds a newer version. */
export class VersionConflictError extends Error {
  constructor(public readonly serverMessage: string) {
    super(`annotation version conflict: ${serverMessage}`);
  }
}

export class ApiError extends Error {
  constructor(public readonly status: number, message: string) {
    super(message);
  }
}

async function failure(res: Response): Promise<never> {
  let detail = res.statusText;
  try {
    const body = (await res.json()) as { error?: string };
    if (body.error) detail = body.error;
  } catch {
    /* non-JSON error body */
  }
  if (res.status === 409) throw new VersionConflictError(detail);
  throw new ApiError(res.status, detail);
}

/** Thin typed client over the annotation server; fetch is injectable for tests. */
export class ApiClient {
  constructor(
    private readonly fetchFn: FetchLike = (u, i) => fetch(u, i),
    private readonly base = '',
  ) {}

  private async getJson<T>(path: string): Promise<T> {
    const res = await this.fetchFn(this.base + path);
    if (!res.ok) await failure(res);
    return (await res.json()) as T;
  }

  listImages(): Promise<ImageInfo[]> {
    return this.getJson('/api/images');
  }

  imageUrl(id: string): string {
    return `${this.base}/api/image/${id}`;
  }

  getAnnotations(id: string): Promise<AnnotationDoc> {
    return this.getJson(`/api/annotations/${id}`);
  }

  async putAnnotations(doc: AnnotationDoc): Promise<AnnotationDoc> {
    const res = await this.fetchFn(`${this.base}/api/annotations/${doc.image_id}`, {
      method: 'PUT',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(doc),
    });
    if (!res.ok) await failure(res);
    return (await res.json()) as AnnotationDoc;
  }

  listPairs(): Promise<PairInfo[]> {
    return this.getJson('/api/pairs');
  }

  getMatches(pairId: string): Promise<MatchDump> {
    return this.getJson(`/api/matches/${pairId}`);
  }

  async putReview(pairId: string, accepted: (boolean | null)[]): Promise<void> {
    const res = await this.fetchFn(`${this.base}/api/matches/${pairId}/review`, {
      method: 'PUT',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ accepted }),
    });
    if (!res.ok) await failure(res);
  }

  async exportControls(pairId: string): Promise<string> {
    const res = await this.fetchFn(`${this.base}/api/export/controls/${pairId}`);
    if (!res.ok) await failure(res);
    return res.text();
  }
}
