import init, { sngp_field, power_iteration_trace, lr_curve } from "./pkg/alf_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function heat(canvas, values, g, color) {
  const ctx = canvas.getContext("2d");
  const cell = canvas.width / g;
  for (let r = 0; r < g; r++) {
    for (let c = 0; c < g; c++) {
      ctx.fillStyle = color(values[r * g + c]);
      ctx.fillRect(c * cell, r * cell, Math.ceil(cell), Math.ceil(cell));
    }
  }
}

function points(canvas, xy, labels, extent) {
  const ctx = canvas.getContext("2d");
  const s = canvas.width / (2 * extent);
  for (let i = 0; i < xy.length / 2; i++) {
    ctx.fillStyle = labels[i] ? "#d33" : "#36c";
    ctx.fillRect((xy[2 * i] + extent) * s - 1, (extent - xy[2 * i + 1]) * s - 1, 2, 2);
  }
}

function fit() {
  const g = 72, extent = 6, n = Math.max(20, num("f-n"));
  const t = performance.now();
  const out = sngp_field(n, num("f-sep"), num("f-ls"), num("f-rf"), g, extent, 1n);
  $("f-time").textContent = `${(performance.now() - t).toFixed(0)} ms`;
  const gg = g * g;
  const variance = out.subarray(0, gg);
  const prob = out.subarray(gg, 2 * gg);
  const xy = out.subarray(3 * gg);
  // two_cluster alternates labels 0, 1, 0, ...
  const labels = Array.from({ length: xy.length / 2 }, (_, i) => i % 2);
  const vmax = Math.max(...variance);
  heat($("f-var"), variance, g, (v) => `hsl(45, 90%, ${8 + 80 * (v / vmax)}%)`);
  heat($("f-prob"), prob, g, (p) => `hsl(${220 - 220 * p}, 70%, ${45 + 45 * (1 - 2 * Math.abs(p - 0.5))}%)`);
  points($("f-var"), xy, labels, extent);
  points($("f-prob"), xy, labels, extent);
}

function lines(canvas, series, colors, ymin, ymax) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#eee";
  ctx.strokeRect(0, 0, w, h);
  const pad = 8;
  const y = (v) => h - pad - ((v - ymin) / (ymax - ymin || 1)) * (h - 2 * pad);
  series.forEach((s, k) => {
    ctx.strokeStyle = colors[k];
    ctx.lineWidth = 2;
    ctx.beginPath();
    s.forEach((v, i) => {
      const x = pad + (i / Math.max(1, s.length - 1)) * (w - 2 * pad);
      i ? ctx.lineTo(x, y(v)) : ctx.moveTo(x, y(v));
    });
    ctx.stroke();
  });
}

function power() {
  const k = Math.max(1, num("p-k"));
  const t = power_iteration_trace(num("p-r"), num("p-c"), k, BigInt(num("p-s")));
  const est = Array.from(t.subarray(0, k));
  const truth = t[k];
  lines($("p-plot"), [est.map(() => truth), est], ["#aaa", "#36c"], Math.min(...est) * 0.98, truth * 1.02);
  $("p-out").textContent = `final ${est[k - 1].toFixed(6)}, svd ${truth.toFixed(6)}, gap ${(truth - est[k - 1]).toExponential(2)}`;
}

function schedule() {
  const c = Array.from(lr_curve(num("l-n"), num("l-lr"), num("l-w"), num("l-m"), num("l-a")));
  lines($("l-plot"), [c], ["#393"], 0, Math.max(...c));
}

await init();
$("f-go").onclick = fit;
$("p-go").onclick = power;
for (const id of ["l-n", "l-lr", "l-w", "l-m", "l-a"]) $(id).oninput = schedule;
fit();
power();
schedule();
