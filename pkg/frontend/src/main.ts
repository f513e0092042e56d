import { ReviewApi } from "./api.js";
import { ReviewStore } from "./store.js";
import { ReviewView } from "./view.js";

const root = document.getElementById("app");
if (!root) throw new Error("missing #app mount point");

const api = new ReviewApi(window.location.origin);
const store = new ReviewStore(api, "human:reviewer");
const view = new ReviewView(root, store);
view.bindKeyboard(document);
void store.load();
