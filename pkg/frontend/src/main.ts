/** DOM wiring: canvas display with pan/zoom, click-to-probe, the result
 *  panel, and the threshold slider. All recognition logic lives in the
 *  service; this file only moves pixels and payloads around. */

import { ProbeClient } from "./api.js";
import { buildPanel, formatConfidence } from "./panel.js";
import {
  ViewTransform,
  canvasToImage,
  clipWindowRect,
  fitView,
  imageToCanvas,
  insideImage,
  zoomAt,
} from "./overlay.js";
import { ProbeEntry, ProbeSession } from "./session.js";

const serviceUrl =
  new URLSearchParams(location.search).get("service") ?? "http://127.0.0.1:8321";
const client = new ProbeClient(serviceUrl);

const canvas = document.getElementById("scene") as HTMLCanvasElement;
const ctx = canvas.getContext("2d")!;
const fileInput = document.getElementById("file") as HTMLInputElement;
const slider = document.getElementById("threshold") as HTMLInputElement;
const sliderValue = document.getElementById("threshold-value")!;
const panelElement = document.getElementById("panel")!;
const statusElement = document.getElementById("status")!;
const exportButton = document.getElementById("export") as HTMLButtonElement;

let image: HTMLImageElement | null = null;
let imageBlob: Blob | null = null;
let view: ViewTransform = { scale: 1, offsetX: 0, offsetY: 0 };
let session: ProbeSession | null = null;

function setStatus(text: string, isError = false) {
  statusElement.textContent = text;
  statusElement.className = isError ? "status error" : "status";
}

function redraw() {
  ctx.fillStyle = "#181818";
  ctx.fillRect(0, 0, canvas.width, canvas.height);
  if (!image) return;
  ctx.save();
  ctx.imageSmoothingEnabled = view.scale < 1;
  ctx.translate(view.offsetX, view.offsetY);
  ctx.scale(view.scale, view.scale);
  ctx.drawImage(image, 0, 0);
  ctx.restore();

  const entry = session?.lastEntry;
  if (entry && image) {
    const rect = clipWindowRect(entry.payload.window, image.width, image.height);
    const a = imageToCanvas({ x: rect.x, y: rect.y }, view);
    ctx.strokeStyle = "#ffd75e";
    ctx.lineWidth = 2;
    ctx.strokeRect(a.x, a.y, rect.width * view.scale, rect.height * view.scale);
    const click = imageToCanvas(entry.coordinate, view);
    ctx.fillStyle = "#ff5e5e";
    ctx.beginPath();
    ctx.arc(click.x, click.y, 4, 0, 2 * Math.PI);
    ctx.fill();
  }
}

function renderPanel(entry: ProbeEntry) {
  const state = buildPanel(entry.payload);
  const rows = state.rows
    .map(
      (row) => `
      <div class="row ${row.emphasized ? "emphasized" : ""}">
        <span class="level">${row.level}</span>
        <span class="name">${row.name}</span>
        <span class="confidence">${formatConfidence(row.confidence)}</span>
      </div>`,
    )
    .join("");
  const tags = state.tags.length
    ? `<div class="tags">${state.tags.join(" &middot; ")}</div>`
    : "";
  panelElement.innerHTML = `
    <div class="rows">${rows}</div>
    ${tags}
    <div class="meta">window ${entry.payload.window.size}px &middot;
      threshold ${entry.threshold.toFixed(2)}${
        entry.payload.seed !== undefined ? ` &middot; seed ${entry.payload.seed}` : ""
      }</div>`;
}

function startSession() {
  if (!imageBlob) return;
  session = new ProbeSession(client, Number(slider.value), undefined, {
    imageBlob,
  });
  session.onResult = (entry) => {
    renderPanel(entry);
    redraw();
    setStatus(`probed (${entry.coordinate.x}, ${entry.coordinate.y})`);
  };
  session.onError = (error) => {
    const message = error instanceof Error ? error.message : String(error);
    setStatus(`probe failed: ${message} — click to retry`, true);
  };
}

fileInput.addEventListener("change", () => {
  const file = fileInput.files?.[0];
  if (!file) return;
  imageBlob = file;
  const url = URL.createObjectURL(file);
  const img = new Image();
  img.onload = () => {
    image = img;
    view = fitView(img.width, img.height, canvas.width, canvas.height);
    startSession();
    redraw();
    setStatus(`loaded ${img.width}x${img.height}; click to probe`);
  };
  img.src = url;
});

canvas.addEventListener("click", (event) => {
  if (!image || !session) return;
  const bounds = canvas.getBoundingClientRect();
  const p = canvasToImage(
    { x: event.clientX - bounds.left, y: event.clientY - bounds.top },
    view,
  );
  const coord = { x: Math.round(p.x), y: Math.round(p.y) };
  if (!insideImage(coord, image.width, image.height)) {
    setStatus("click inside the image", true);
    return;
  }
  setStatus(`probing (${coord.x}, ${coord.y})...`);
  session.probeAt(coord.x, coord.y);
});

canvas.addEventListener("wheel", (event) => {
  if (!image) return;
  event.preventDefault();
  const bounds = canvas.getBoundingClientRect();
  const at = { x: event.clientX - bounds.left, y: event.clientY - bounds.top };
  view = zoomAt(view, at, event.deltaY < 0 ? 1.15 : 1 / 1.15);
  redraw();
});

slider.addEventListener("input", () => {
  sliderValue.textContent = Number(slider.value).toFixed(2);
  if (session) {
    setStatus("re-probing with new threshold...");
    session.setThreshold(Number(slider.value));
  }
});

exportButton.addEventListener("click", () => {
  if (!session) return;
  const blob = new Blob([JSON.stringify(session.export(), null, 1)], {
    type: "application/json",
  });
  const a = document.createElement("a");
  a.href = URL.createObjectURL(blob);
  a.download = "probe-session.json";
  a.click();
});

setStatus(`service: ${serviceUrl} — load an image to begin`);
redraw();
