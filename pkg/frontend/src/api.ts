/** Typed client for the review service JSON API. */

export type ReviewState = "pending" | "accepted" | "overridden";

export interface Pair {
  id: string;
  image_ref: string;
  caption: string;
  source: string;
}

export interface AnnotationDto {
  pair_id: string;
  score: number;
  rationale: string;
  annotator: string;
  review_state: ReviewState;
  override_score: number | null;
  override_rationale: string | null;
  reviewer: string | null;
  ts: string;
}

export interface QueueItem {
  pair: Pair;
  annotation: AnnotationDto;
}

export interface PairDetail {
  pair: Pair;
  annotation: AnnotationDto | null;
}

export interface StatsDto {
  pending: number;
  accepted: number;
  overridden: number;
  total: number;
}

export type Decision =
  | { kind: "accept"; reviewer?: string }
  | { kind: "override"; score: number; rationale: string; reviewer?: string };

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    detail: string,
  ) {
    super(`${code} (${status}): ${detail}`);
  }
}

/** Transport-agnostic surface the store depends on. */
export interface ReviewClient {
  queue(state?: ReviewState, limit?: number): Promise<QueueItem[]>;
  pair(pairId: string): Promise<PairDetail>;
  review(pairId: string, decision: Decision): Promise<PairDetail>;
}

async function parseError(response: Response): Promise<ApiError> {
  let code = "HttpError";
  let detail = response.statusText;
  try {
    const body = (await response.json()) as { error?: string; detail?: string };
    if (body.error) code = body.error;
    if (body.detail) detail = body.detail;
  } catch {
    // non-JSON error body; keep defaults
  }
  return new ApiError(response.status, code, detail);
}

export class ReviewApi implements ReviewClient {
  constructor(readonly baseUrl: string) {}

  private async get<T>(path: string): Promise<T> {
    const response = await fetch(`${this.baseUrl}${path}`);
    if (!response.ok) throw await parseError(response);
    return (await response.json()) as T;
  }

  async queue(state: ReviewState = "pending", limit = 50): Promise<QueueItem[]> {
    return this.get<QueueItem[]>(`/api/queue?state=${state}&limit=${limit}`);
  }

  async pair(pairId: string): Promise<PairDetail> {
    return this.get<PairDetail>(`/api/pairs/${pairId}`);
  }

  async stats(): Promise<StatsDto> {
    return this.get<StatsDto>("/api/stats");
  }

  async review(pairId: string, decision: Decision): Promise<PairDetail> {
    const body: Record<string, unknown> = { decision: decision.kind };
    if (decision.kind === "override") {
      body.score = decision.score;
      body.rationale = decision.rationale;
    }
    if (decision.reviewer) body.reviewer = decision.reviewer;
    const response = await fetch(`${this.baseUrl}/api/pairs/${pairId}/review`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!response.ok) throw await parseError(response);
    return (await response.json()) as PairDetail;
  }
}
