/** Browser entry point: wire the app into #app against the service URL.
 *
 * The service origin comes from the `api` query parameter (for example
 * `?api=http://localhost:8000`); with no parameter the page assumes it is
 * served from the same origin as the service.
 */

import { ApiClient } from "./api.js";
import { mountApp } from "./app.js";

const params = new URLSearchParams(window.location.search);
const base = params.get("api") ?? "";

const root = document.getElementById("app");
if (!root) throw new Error("missing #app element");

mountApp(root, new ApiClient(base));
