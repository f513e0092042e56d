/** Review queue state: load, optimistic decisions, rollback on failure.
 *
 * Every value shown to the reviewer round-trips from the API; the store never
 * invents or mutates scores outside a submitted decision.
 */

import { ApiError, Decision, QueueItem, ReviewClient, ReviewState } from "./api.js";

export interface ReviewCard {
  pair_id: string;
  image_ref: string;
  caption: string;
  score: number;
  rationale: string;
  review_state: ReviewState;
}

export function toCard(item: QueueItem): ReviewCard {
  return {
    pair_id: item.pair.id,
    image_ref: item.pair.image_ref,
    caption: item.pair.caption,
    score: item.annotation.score,
    rationale: item.annotation.rationale,
    review_state: item.annotation.review_state,
  };
}

export type SubmitResult = "applied" | "conflict" | "rejected" | "failed";

export interface StoreState {
  cards: ReviewCard[];
  loading: boolean;
  banner: string | null;
  toast: string | null;
}

type Listener = (state: StoreState) => void;

export class ReviewStore {
  private cards: ReviewCard[] = [];
  private loading = false;
  private banner: string | null = null;
  private toast: string | null = null;
  private listeners: Listener[] = [];

  constructor(
    private readonly api: ReviewClient,
    private readonly reviewer?: string,
  ) {}

  get state(): StoreState {
    return {
      cards: [...this.cards],
      loading: this.loading,
      banner: this.banner,
      toast: this.toast,
    };
  }

  onChange(listener: Listener): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private emit(): void {
    const snapshot = this.state;
    for (const listener of this.listeners) listener(snapshot);
  }

  /** Load the pending queue. On failure the current cards stay untouched and
   * a retry banner is raised; there is no partial render. */
  async load(state: ReviewState = "pending", limit = 50): Promise<void> {
    this.loading = true;
    this.toast = null;
    this.emit();
    try {
      const items = await this.api.queue(state, limit);
      this.cards = items.map(toCard);
      this.banner = null;
    } catch (error) {
      this.banner = `Could not load the review queue: ${describe(error)}. Retry.`;
    } finally {
      this.loading = false;
      this.emit();
    }
  }

  /** Submit a decision with optimistic removal and rollback on failure. */
  async submit(pairId: string, decision: Decision): Promise<SubmitResult> {
    if (decision.kind === "override") {
      if (!Number.isInteger(decision.score) || decision.score < 1 || decision.score > 10) {
        this.toast = `Override score must be an integer from 1 to 10.`;
        this.emit();
        return "rejected";
      }
    }
    const index = this.cards.findIndex((card) => card.pair_id === pairId);
    if (index < 0) return "rejected";
    const removed = this.cards[index]!;
    this.cards.splice(index, 1);
    this.toast = null;
    this.emit();

    const withReviewer: Decision =
      this.reviewer && !decision.reviewer ? { ...decision, reviewer: this.reviewer } : decision;
    try {
      await this.api.review(pairId, withReviewer);
      return "applied";
    } catch (error) {
      if (error instanceof ApiError && error.code === "AlreadyReviewed") {
        await this.refreshAfterConflict(pairId, index, removed);
        return "conflict";
      }
      // true failure: roll the card back where it was
      this.cards.splice(index, 0, removed);
      this.banner = `Submitting the decision failed: ${describe(error)}. Retry.`;
      this.emit();
      return "failed";
    }
  }

  /** On a review conflict, re-fetch the pair so the card reflects server
   * state; reviewed-elsewhere cards stay out of the pending list. */
  private async refreshAfterConflict(
    pairId: string,
    index: number,
    removed: ReviewCard,
  ): Promise<void> {
    try {
      const detail = await this.api.pair(pairId);
      if (detail.annotation && detail.annotation.review_state === "pending") {
        this.cards.splice(index, 0, {
          ...removed,
          score: detail.annotation.score,
          rationale: detail.annotation.rationale,
          review_state: detail.annotation.review_state,
        });
      }
      this.toast = `Pair ${pairId.slice(0, 8)}… was already reviewed elsewhere.`;
    } catch (error) {
      this.cards.splice(index, 0, removed);
      this.banner = `Could not refresh ${pairId.slice(0, 8)}…: ${describe(error)}. Retry.`;
    }
    this.emit();
  }
}

function describe(error: unknown): string {
  if (error instanceof ApiError) return error.message;
  if (error instanceof Error) return error.message;
  return String(error);
}
