export type KeypointKind = 'bifurcation' | 'crossover' | 'intersection';

export interface Keypoint {
  x: number;
  y: number;
  kind: KeypointKind;
}

export interface AnnotationDoc {
  image_id: string;
  image_path: string;
  width: number;
  height: number;
  keypoints: Keypoint[];
  annotator: string;
  version: number;
}

export interface ImageInfo {
  id: string;
  width: number;
  height: number;
  annotated: boolean;
}

export interface PairInfo {
  id: string;
  query: string;
  ref: string;
  category: string | null;
  has_matches: boolean;
}

/** Server match dump: [queryIndex, refIndex, descriptorDistance]. */
export type MatchRow = [number, number, number];

/** Keypoint rows in dumps: [x, y, score]. */
export type KeypointRow = [number, number, number];

export interface MatchDump {
  pair_id: string;
  query: string;
  ref: string;
  query_keypoints: KeypointRow[];
  ref_keypoints: KeypointRow[];
  matches: MatchRow[];
  homography: number[][] | null;
  status: string;
  mee: number | null;
  mae: number | null;
  verdict: string | null;
  review: (boolean | null)[];
}

export type MatchStatus = 'unreviewed' | 'accepted' | 'rejected';
