/** DOM rendering for the review queue plus keyboard shortcuts. */

import { ReviewCard, ReviewStore, StoreState } from "./store.js";

const BROKEN_IMAGE_PLACEHOLDER =
  "data:image/svg+xml," +
  encodeURIComponent(
    '<svg xmlns="http://www.w3.org/2000/svg" width="320" height="200">' +
      '<rect width="100%" height="100%" fill="#e8e8ee"/>' +
      '<text x="50%" y="50%" text-anchor="middle" fill="#667">image unavailable</text></svg>',
  );

export class ReviewView {
  constructor(
    private readonly root: HTMLElement,
    private readonly store: ReviewStore,
  ) {
    store.onChange((state) => this.render(state));
  }

  render(state: StoreState): void {
    this.root.textContent = "";
    if (state.banner) {
      const banner = el("div", "banner");
      banner.textContent = state.banner;
      const retry = el("button", "retry") as HTMLButtonElement;
      retry.textContent = "Retry";
      retry.addEventListener("click", () => void this.store.load());
      banner.append(" ", retry);
      this.root.append(banner);
    }
    if (state.toast) {
      const toast = el("div", "toast");
      toast.textContent = state.toast;
      this.root.append(toast);
    }
    if (state.loading) {
      const loading = el("div", "loading");
      loading.textContent = "Loading…";
      this.root.append(loading);
      return;
    }
    if (state.cards.length === 0) {
      if (!state.banner) {
        const empty = el("div", "empty");
        empty.textContent = "No pending items.";
        this.root.append(empty);
      }
      return;
    }
    const list = el("div", "cards");
    state.cards.forEach((card, i) => list.append(this.renderCard(card, i === 0)));
    this.root.append(list);
  }

  private renderCard(card: ReviewCard, focused: boolean): HTMLElement {
    const box = el("article", focused ? "card focused" : "card");
    box.dataset.pairId = card.pair_id;

    const img = el("img", "pair-image") as HTMLImageElement;
    img.src = card.image_ref;
    img.alt = card.caption;
    img.addEventListener("error", () => {
      if (img.src !== BROKEN_IMAGE_PLACEHOLDER) img.src = BROKEN_IMAGE_PLACEHOLDER;
    });
    box.append(img);

    const caption = el("p", "caption");
    caption.textContent = card.caption;
    box.append(caption);

    const score = el("p", "score");
    score.textContent = `Teacher score: ${card.score}/10`;
    box.append(score);

    const rationale = el("p", "rationale");
    rationale.textContent = card.rationale;
    box.append(rationale);

    const controls = el("div", "controls");
    const accept = el("button", "accept") as HTMLButtonElement;
    accept.textContent = "Accept (a)";
    accept.addEventListener("click", () => void this.store.submit(card.pair_id, { kind: "accept" }));
    controls.append(accept);

    const overrideScore = el("input", "override-score") as HTMLInputElement;
    overrideScore.type = "number";
    overrideScore.min = "1";
    overrideScore.max = "10";
    overrideScore.step = "1";
    overrideScore.placeholder = "1-10";
    controls.append(overrideScore);

    const overrideRationale = el("input", "override-rationale") as HTMLInputElement;
    overrideRationale.type = "text";
    overrideRationale.placeholder = "why the override?";
    controls.append(overrideRationale);

    const override = el("button", "override") as HTMLButtonElement;
    override.textContent = "Override (o)";
    override.addEventListener("click", () =>
      void this.store.submit(card.pair_id, {
        kind: "override",
        score: Number(overrideScore.value),
        rationale: overrideRationale.value,
      }),
    );
    controls.append(override);
    box.append(controls);
    return box;
  }

  /** a = accept the focused card, o = focus its override score input. */
  bindKeyboard(target: Document): void {
    target.addEventListener("keydown", (event: KeyboardEvent) => {
      const active = target.activeElement;
      if (active instanceof HTMLInputElement) return;
      const first = this.root.querySelector<HTMLElement>(".card");
      if (!first || !first.dataset.pairId) return;
      if (event.key === "a") {
        void this.store.submit(first.dataset.pairId, { kind: "accept" });
      } else if (event.key === "o") {
        first.querySelector<HTMLInputElement>(".override-score")?.focus();
      }
    });
  }
}

function el(tag: string, className: string): HTMLElement {
  const node = document.createElement(tag);
  node.className = className;
  return node;
}
