import init, { gate_explorer, flops_curve, controller_simulation } from "./pkg/skipmid_web.js";

const $ = (id) => document.getElementById(id);
const COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

function call(fn, input, out) {
  try {
    return JSON.parse(fn(JSON.stringify(input)));
  } catch (e) {
    out.innerHTML = `<div class="err">${e}</div>`;
    return null;
  }
}

function lines(canvas, xs, series, { ymin = 0, ymax = 1, hlines = [] } = {}) {
  const ctx = canvas.getContext("2d");
  const w = canvas.width, h = canvas.height, pad = 36;
  ctx.clearRect(0, 0, w, h);
  const x = (v) => pad + ((v - xs[0]) / (xs[xs.length - 1] - xs[0] || 1)) * (w - 2 * pad);
  const y = (v) => h - pad - ((v - ymin) / (ymax - ymin || 1)) * (h - 2 * pad);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
  ctx.fillStyle = "#444";
  ctx.font = "11px sans-serif";
  ctx.fillText(ymax.toPrecision(3), 2, pad + 4);
  ctx.fillText(ymin.toPrecision(3), 2, h - pad);
  ctx.fillText(String(xs[0]), pad, h - pad + 14);
  ctx.fillText(String(xs[xs.length - 1]), w - pad - 20, h - pad + 14);
  ctx.setLineDash([4, 4]);
  hlines.forEach((v, i) => {
    ctx.strokeStyle = COLORS[i % COLORS.length];
    ctx.beginPath();
    ctx.moveTo(pad, y(v));
    ctx.lineTo(w - pad, y(v));
    ctx.stroke();
  });
  ctx.setLineDash([]);
  series.forEach((ys, i) => {
    ctx.strokeStyle = COLORS[i % COLORS.length];
    ctx.beginPath();
    ys.forEach((v, j) => (j ? ctx.lineTo(x(xs[j]), y(v)) : ctx.moveTo(x(xs[j]), y(v))));
    ctx.stroke();
  });
}

function table(rows, header) {
  const head = `<tr>${header.map((c) => `<th>${c}</th>`).join("")}</tr>`;
  const body = rows.map((r) => `<tr>${r.map((c) => `<td>${c}</td>`).join("")}</tr>`).join("");
  return `<table>${head}${body}</table>`;
}

function explore() {
  const soft = $("masks").value.trim().split("\n").map((r) => r.split(",").map(Number));
  const out = $("gate-out");
  const r = call(gate_explorer, { n_layers: 2 * soft.length, soft_mask: soft }, out);
  if (!r) return;
  const tokens = soft[0].length;
  const rows = [];
  r.gates.forEach((g, l) => rows.push([`g_${l}`, ...g.map((v) => v.toFixed(2)), (r.layer_sparsity[l] * 100).toFixed(0) + "%"]));
  rows.push(["blocks", ...r.blocks, ""]);
  out.innerHTML = table(rows, ["layer", ...Array.from({ length: tokens }, (_, t) => `t${t}`), "z"]);
  const ctx = $("attn").getContext("2d");
  const cell = $("attn").width / tokens;
  ctx.clearRect(0, 0, 300, 300);
  r.attention.forEach((row, i) =>
    row.forEach((p, j) => {
      ctx.fillStyle = `rgba(31,119,180,${p})`;
      ctx.fillRect(j * cell, i * cell, cell - 1, cell - 1);
    }),
  );
}

function curve() {
  const input = {
    dim: +$("c-dim").value,
    n_layers: +$("c-layers").value,
    n_heads: +$("c-heads").value,
    n_kv_heads: +$("c-heads").value,
    vocab_size: +$("c-vocab").value,
    seq_len: +$("c-seq").value,
    points: 41,
  };
  const info = $("curve-info");
  const r = call(flops_curve, input, info);
  if (!r) return;
  info.textContent = `params ${r.total_params.toLocaleString()} (block ${r.block_params.toLocaleString()}, gates ${r.gating_params}); dense forward ${(r.dense_flops / 1e9).toFixed(2)} GFLOPs per sequence`;
  const zs = r.points.map((p) => p.z);
  lines($("curve-plot"), zs, [r.points.map((p) => p.ratio)]);
}

function simulate() {
  const input = {
    targets: $("s-targets").value.split(",").map(Number),
    steps: +$("s-steps").value,
    variant: $("s-variant").value,
    gamma: +$("s-gamma").value,
    delta: +$("s-delta").value,
  };
  const info = $("sim-info");
  const r = call(controller_simulation, input, info);
  if (!r) return;
  info.textContent = "final gates " + r.final_gates.map((g) => g.toFixed(3)).join(", ");
  lines($("sim-plot"), r.steps, r.gates, { hlines: input.targets });
}

await init();
$("explore").onclick = explore;
$("curve").onclick = curve;
$("simulate").onclick = simulate;
explore();
curve();
simulate();
