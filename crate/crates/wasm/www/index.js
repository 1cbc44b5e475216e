import init, { Scene, dilatedFootprint } from "./pkg/nnid_wasm.js";

const $ = (id) => document.getElementById(id);
let scene = null;

function paint(canvas, rgba, w, h) {
  canvas.width = w;
  canvas.height = h;
  canvas.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), w, h), 0, 0);
}

function show(next) {
  if (scene) scene.free();
  scene = next;
  const w = scene.width(), h = scene.height();
  paint($("image"), scene.image_rgba(), w, h);
  paint($("heat"), scene.heatmap(), w, h);
  $("size").max = Math.min(w, h);
  runCrop();
}

function runCrop() {
  if (!scene) return;
  const size = Number($("size").value);
  $("sizeOut").textContent = size;
  const w = scene.width(), h = scene.height();
  const t0 = performance.now();
  const [x, y, d, n, cx, cy, cd] = scene.crop(size, Number($("stride").value));
  const ms = performance.now() - t0;
  const canvas = $("crop");
  paint(canvas, scene.image_rgba(), w, h);
  const ctx = canvas.getContext("2d");
  ctx.lineWidth = Math.max(2, w / 200);
  ctx.strokeStyle = "#999";
  ctx.setLineDash([6, 4]);
  ctx.strokeRect(cx, cy, size, size);
  ctx.setLineDash([]);
  ctx.strokeStyle = "#e4002b";
  ctx.strokeRect(x, y, size, size);
  $("cropOut").textContent =
    `best (${x}, ${y}) KL=${d.toExponential(3)} | center (${cx}, ${cy}) KL=${cd.toExponential(3)} | ${n} positions in ${ms.toFixed(0)} ms`;
}

function runFootprint() {
  const d = Number($("dil").value);
  $("dilOut").textContent = d;
  const field = 29, cell = 10;
  const values = dilatedFootprint(5, d, field);
  const ctx = $("fp").getContext("2d");
  ctx.clearRect(0, 0, field * cell, field * cell);
  for (let i = 0; i < values.length; i++) {
    ctx.fillStyle = values[i] ? "#1f5fa8" : "#eee";
    ctx.fillRect((i % field) * cell, Math.floor(i / field) * cell, cell - 1, cell - 1);
  }
  $("fpOut").textContent = `25 taps spread over ${4 * d + 1}x${4 * d + 1} pixels`;
}

async function loadFile(file) {
  const bitmap = await createImageBitmap(file);
  const scale = Math.min(1, 512 / Math.max(bitmap.width, bitmap.height));
  const w = Math.max(16, Math.round(bitmap.width * scale));
  const h = Math.max(16, Math.round(bitmap.height * scale));
  const c = new OffscreenCanvas(w, h);
  const ctx = c.getContext("2d");
  ctx.drawImage(bitmap, 0, 0, w, h);
  const rgba = ctx.getImageData(0, 0, w, h).data;
  const gray = new Uint8Array(w * h);
  for (let i = 0; i < gray.length; i++) {
    gray[i] = Math.round(0.299 * rgba[4 * i] + 0.587 * rgba[4 * i + 1] + 0.114 * rgba[4 * i + 2]);
  }
  show(new Scene(gray, w, h));
}

await init();
$("gen").onclick = () => show(Scene.synthetic(384, 288, Number($("seed").value)));
$("file").onchange = (e) => e.target.files[0] && loadFile(e.target.files[0]);
$("size").oninput = runCrop;
$("stride").onchange = runCrop;
$("dil").oninput = runFootprint;
show(Scene.synthetic(384, 288, 1));
runFootprint();
