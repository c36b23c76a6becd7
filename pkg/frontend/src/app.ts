/** DOM shell: canvas rendering and event wiring around AnnotationSession.
 *
 * All decisions live in the session / pure modules; this file only draws
 * what the session says and forwards pointer, wheel and keyboard events.
 */

import { ApiClient } from "./api.js";
import { AnnotationSession } from "./session.js";
import { OVERLAY_ALPHA, colorFor, tintRgba } from "./overlay.js";
import { imageToScreen } from "./view.js";
import { AXES, type Axis, type VolumeInfo } from "./types.js";

const CANVAS_SIZE = 640;
const TOAST_MS = 4500;

export function mountApp(root: HTMLElement, api: ApiClient): AnnotationSession {
  const session = new AnnotationSession(api);

  root.innerHTML = `
    <div class="topbar">
      <select data-role="volume" title="volume"></select>
      <span class="group" data-role="axes"></span>
      <input data-role="slice" type="range" min="0" max="0" value="0" />
      <span data-role="slice-label" class="mono"></span>
      <button data-role="run">Run</button>
      <span data-role="status" class="mono"></span>
    </div>
    <div class="stage"><canvas data-role="canvas" tabindex="0"></canvas></div>
    <div class="sidebar" data-role="instances"></div>
    <div class="toasts" data-role="toasts"></div>
  `;

  const $ = <T extends HTMLElement>(role: string): T => {
    const el = root.querySelector<T>(`[data-role="${role}"]`);
    if (!el) throw new Error(`missing element ${role}`);
    return el;
  };

  const volumeSelect = $<HTMLSelectElement>("volume");
  const axesSpan = $<HTMLElement>("axes");
  const sliceSlider = $<HTMLInputElement>("slice");
  const sliceLabel = $<HTMLElement>("slice-label");
  const runButton = $<HTMLButtonElement>("run");
  const statusSpan = $<HTMLElement>("status");
  const canvas = $<HTMLCanvasElement>("canvas");
  const instancesDiv = $<HTMLElement>("instances");
  const toastsDiv = $<HTMLElement>("toasts");

  canvas.width = CANVAS_SIZE;
  canvas.height = CANVAS_SIZE;
  const maybeCtx = canvas.getContext("2d");
  if (!maybeCtx) throw new Error("canvas 2d context unavailable");
  const ctx: CanvasRenderingContext2D = maybeCtx;

  // -- axis buttons ---------------------------------------------------------

  for (const axis of AXES) {
    const button = document.createElement("button");
    button.textContent = axis;
    button.dataset.axis = axis;
    button.addEventListener("click", () => {
      session.setAxis(axis);
      syncControls();
    });
    axesSpan.appendChild(button);
  }

  // -- volumes --------------------------------------------------------------

  let volumes: VolumeInfo[] = [];

  async function loadVolumes(): Promise<void> {
    try {
      volumes = await api.listVolumes();
    } catch {
      statusSpan.textContent = "service unreachable";
      return;
    }
    volumeSelect.innerHTML = "";
    for (const info of volumes) {
      const option = document.createElement("option");
      option.value = info.id;
      option.textContent = `${info.id} (${info.shape.join("x")})`;
      volumeSelect.appendChild(option);
    }
    const first = volumes[0];
    if (first) {
      session.openVolume(first);
      syncControls();
    } else {
      statusSpan.textContent = "no volumes uploaded yet";
    }
  }

  volumeSelect.addEventListener("change", () => {
    const info = volumes.find((v) => v.id === volumeSelect.value);
    if (info) {
      session.openVolume(info);
      syncControls();
    }
  });

  // -- slice & run controls ---------------------------------------------------

  sliceSlider.addEventListener("input", () => {
    session.setSlice(Number(sliceSlider.value));
    syncControls();
  });

  runButton.addEventListener("click", () => {
    void session.run().then(syncControls);
  });

  function syncControls(): void {
    sliceSlider.max = String(Math.max(session.sliceCount - 1, 0));
    sliceSlider.value = String(session.sliceIndex);
    sliceLabel.textContent = `${session.axis}=${session.sliceIndex}/${Math.max(session.sliceCount - 1, 0)}`;
    runButton.textContent = session.refineEnabled ? "Refine" : "Run";
    for (const button of axesSpan.querySelectorAll("button")) {
      button.classList.toggle("active", button.dataset.axis === session.axis);
    }
  }

  // -- pointer & keyboard ----------------------------------------------------

  let panning: { lastX: number; lastY: number } | null = null;
  let spaceHeld = false;

  canvas.addEventListener("pointerdown", (event) => {
    canvas.focus();
    canvas.setPointerCapture(event.pointerId);
    if (event.button === 1 || spaceHeld) {
      panning = { lastX: event.offsetX, lastY: event.offsetY };
      event.preventDefault();
      return;
    }
    if (event.button === 0) session.pointerDown(event.offsetX, event.offsetY);
  });

  canvas.addEventListener("pointermove", (event) => {
    if (panning) {
      session.dragPan(event.offsetX - panning.lastX, event.offsetY - panning.lastY);
      panning = { lastX: event.offsetX, lastY: event.offsetY };
      return;
    }
    session.pointerMove(event.offsetX, event.offsetY);
  });

  canvas.addEventListener("pointerup", (event) => {
    canvas.releasePointerCapture(event.pointerId);
    if (panning) {
      panning = null;
      return;
    }
    if (event.button === 0) session.pointerUp(event.offsetX, event.offsetY);
  });

  canvas.addEventListener("wheel", (event) => {
    event.preventDefault();
    session.wheelZoom(event.offsetX, event.offsetY, event.deltaY);
  }, { passive: false });

  window.addEventListener("keydown", (event) => {
    if (event.key === "Escape") session.escape();
    if (event.key === " ") spaceHeld = true;
    if (event.key === "ArrowRight" || event.key === "ArrowUp") {
      session.setSlice(session.sliceIndex + 1);
      syncControls();
    }
    if (event.key === "ArrowLeft" || event.key === "ArrowDown") {
      session.setSlice(session.sliceIndex - 1);
      syncControls();
    }
  });
  window.addEventListener("keyup", (event) => {
    if (event.key === " ") spaceHeld = false;
  });

  // -- slice image cache ------------------------------------------------------

  const imageCache = new Map<string, HTMLImageElement>();
  let imagesDirty = 0;

  function sliceImage(url: string): HTMLImageElement {
    let image = imageCache.get(url);
    if (!image) {
      if (imageCache.size > 512) imageCache.clear();
      image = new Image();
      image.src = url;
      image.addEventListener("load", () => {
        imagesDirty++;
      });
      imageCache.set(url, image);
    }
    return image;
  }

  // -- rendering ---------------------------------------------------------------

  const scratch = document.createElement("canvas");
  const scratchCtx = scratch.getContext("2d");

  function draw(): void {
    ctx.setTransform(1, 0, 0, 1, 0, 0);
    ctx.fillStyle = "#111";
    ctx.fillRect(0, 0, canvas.width, canvas.height);
    const volume = session.volume;
    if (!volume) return;

    const view = session.view;
    const [rows, cols] = session.planeSize;
    ctx.imageSmoothingEnabled = false;
    ctx.setTransform(view.zoom, 0, 0, view.zoom, view.panX, view.panY);

    const image = sliceImage(api.sliceUrl(volume.id, session.axis, session.sliceIndex));
    if (image.complete && image.naturalWidth > 0) {
      ctx.drawImage(image, 0, 0);
    } else {
      ctx.fillStyle = "#222";
      ctx.fillRect(0, 0, cols, rows);
    }

    if (scratchCtx) {
      for (const { instanceId, plane } of session.overlayPlanes()) {
        // full-strength color on a transparent buffer; the canvas blend
        // applies the overlay alpha when the scratch layer is drawn
        const data = new ImageData(cols, rows);
        tintRgba(data.data, plane, colorFor(instanceId), 1.0);
        const alphaByte = Math.round(OVERLAY_ALPHA * 255);
        for (let i = 0; i < plane.length; i++) {
          data.data[i * 4 + 3] = plane[i] ? alphaByte : 0;
        }
        scratch.width = cols;
        scratch.height = rows;
        scratchCtx.putImageData(data, 0, 0);
        ctx.drawImage(scratch, 0, 0);
      }
    }

    drawDraft();
  }

  function drawDraft(): void {
    const draft = session.draft;
    ctx.setTransform(1, 0, 0, 1, 0, 0);
    ctx.strokeStyle = "#ffd34d";
    ctx.fillStyle = "#ffd34d";
    ctx.lineWidth = 1.5;
    ctx.setLineDash([6, 4]);
    if (draft.kind === "dragging" || draft.kind === "box") {
      const a = imageToScreen(session.view, Math.min(draft.x0, draft.x1), Math.min(draft.y0, draft.y1));
      const b = imageToScreen(session.view, Math.max(draft.x0, draft.x1), Math.max(draft.y0, draft.y1));
      ctx.strokeRect(a.x, a.y, b.x - a.x, b.y - a.y);
    } else if (draft.kind === "point") {
      const p = imageToScreen(session.view, draft.x, draft.y);
      ctx.setLineDash([]);
      ctx.beginPath();
      ctx.arc(p.x, p.y, 4, 0, Math.PI * 2);
      ctx.fill();
    }
    ctx.setLineDash([]);
  }

  // -- status, instances, toasts -----------------------------------------------

  function syncStatus(): void {
    const job = session.activeJob;
    if (!job) {
      statusSpan.textContent = "";
      return;
    }
    const { labeled, total } = job.progress;
    statusSpan.textContent = `job ${job.id}: ${job.status} (${labeled}/${total} slices)`;
  }

  function syncInstances(): void {
    const items = session.instances;
    instancesDiv.innerHTML = "";
    for (const { id, name } of items) {
      const label = document.createElement("label");
      const box = document.createElement("input");
      box.type = "checkbox";
      box.checked = !session.hiddenInstances.has(id);
      box.addEventListener("change", () => session.setInstanceVisible(id, box.checked));
      const [r, g, b] = colorFor(id);
      label.style.borderLeft = `6px solid rgb(${r},${g},${b})`;
      label.appendChild(box);
      label.appendChild(document.createTextNode(` ${name}`));
      instancesDiv.appendChild(label);
    }
  }

  let toastsShown = 0;

  function syncToasts(): void {
    while (toastsShown < session.toasts.length) {
      const message = session.toasts[toastsShown++];
      const div = document.createElement("div");
      div.className = "toast";
      div.textContent = message ?? "";
      toastsDiv.appendChild(div);
      setTimeout(() => div.remove(), TOAST_MS);
    }
  }

  // -- frame loop ---------------------------------------------------------------

  let renderedRevision = -1;
  let renderedDirty = -1;

  function frame(): void {
    if (session.revision !== renderedRevision || imagesDirty !== renderedDirty) {
      renderedRevision = session.revision;
      renderedDirty = imagesDirty;
      draw();
      syncStatus();
      syncInstances();
      syncToasts();
      syncControls();
    }
    requestAnimationFrame(frame);
  }

  void loadVolumes();
  requestAnimationFrame(frame);
  return session;
}
