import init, { planView, checkpointView, trainingCurves } from "./pkg/pear_web.js";

const $ = (id) => document.getElementById(id);
const COLORS = { "full-adapters": "#555", "vanilla-prune": "#d9822b", pear: "#2b7a4b" };

function call(fn, ...args) {
  try {
    return { ok: JSON.parse(fn(...args)) };
  } catch (e) {
    return { err: e.message ?? String(e) };
  }
}

function slotRow(label, bank) {
  const cells = bank.slots.map((s, i) => {
    const text = s.kind === "shared" ? `${i} ← ${s.donor}` : `${i}`;
    return `<div class="slot ${s.kind}" title="${s.kind}">${text}</div>`;
  });
  return `<div class="row"><div class="tag">${label}</div>${cells.join("")}
    <div>${bank.params} params, ${bank.positions} positions adapted</div></div>`;
}

function renderPlan() {
  const ratio = Number($("ratio").value);
  $("ratio-out").textContent = ratio.toFixed(2);
  const r = call(planView, $("scores").value, ratio, "none", 0.5, 0.5);
  if (r.err) {
    $("plan").innerHTML = `<p class="error">${r.err}</p>`;
    return;
  }
  const p = r.ok;
  const [a, b, d] = p.signature;
  $("plan").innerHTML = `
    <p>n = ${p.n}, m = ${p.m}. Ranking by importance: [${p.ranking.join(", ")}].
       Pruned (high to low): [${p.pruned.join(", ")}], donors: [${p.donors.join(", ")}].
       Each pair is ${a}×${d} + ${d}×${b} = ${a * d + d * b} scalars.</p>
    ${slotRow("all", p.full)}${slotRow("vanilla", p.vanilla)}${slotRow("pear", p.pear)}`;
}

function heat(title, values) {
  const max = Math.max(...values.map(Math.abs), 1e-9);
  const cells = values.map((v) => {
    const t = Math.abs(v) / max;
    const rgb = v >= 0 ? `rgba(43,122,75,${t})` : `rgba(176,0,32,${t})`;
    return `<div style="background:${rgb}">${v.toFixed(2)}</div>`;
  });
  return `<div><div>${title}</div><div class="grid">${cells.join("")}</div></div>`;
}

function renderCheckpoint() {
  const mode = $("ck-mode").value;
  const c1 = Number($("c1").value);
  const c2 = Number($("c2").value);
  $("c1-out").textContent = c1.toFixed(2);
  $("c2-out").textContent = c2.toFixed(2);
  const r = call(checkpointView, Number($("ck-seed").value) >>> 0, mode, c1, c2);
  if (r.err) {
    $("checkpoint").innerHTML = `<p class="error">${r.err}</p>`;
    return;
  }
  const v = r.ok;
  $("checkpoint").innerHTML =
    heat("donor", v.donor.delta) +
    heat("pruned", v.pruned.delta) +
    heat(`donor after (c1=${v.c1}, c2=${v.c2})`, v.merged.delta);
}

function renderCurves(data) {
  const svg = $("curve");
  const [w, h, pad] = [svg.width.baseVal.value, svg.height.baseVal.value, 36];
  const runs = Object.entries(data.runs);
  const all = runs.flatMap(([, r]) => r.loss);
  const [lo, hi] = [Math.min(...all), Math.max(...all)];
  const x = (i) => pad + (i / (data.epochs - 1)) * (w - 2 * pad);
  const y = (v) => h - pad - ((v - lo) / (hi - lo || 1)) * (h - 2 * pad);
  const lines = runs.map(([name, r]) => {
    const pts = r.loss.map((v, i) => `${x(i)},${y(v)}`).join(" ");
    return `<polyline fill="none" stroke="${COLORS[name]}" stroke-width="2" points="${pts}"/>`;
  });
  const boundary = x(data.warmup - 0.5);
  svg.innerHTML = `
    <line x1="${boundary}" x2="${boundary}" y1="${pad}" y2="${h - pad}" stroke="#aaa" stroke-dasharray="4"/>
    <text x="${boundary + 4}" y="${pad + 12}" font-size="11" fill="#777">prune and share</text>
    <text x="${pad}" y="${h - 10}" font-size="11">epoch 1</text>
    <text x="${w - pad - 40}" y="${h - 10}" font-size="11">epoch ${data.epochs}</text>
    <text x="4" y="${pad}" font-size="11">${hi.toFixed(3)}</text>
    <text x="4" y="${h - pad}" font-size="11">${lo.toFixed(3)}</text>
    ${lines.join("")}`;
  $("tr-summary").innerHTML = runs
    .map(([name, r]) => `<span style="color:${COLORS[name]}">■ ${name}: test ${(100 * r.test).toFixed(1)}%,
      ${r.params} params, ${r.positions} positions</span>`)
    .join("");
}

function train() {
  $("tr-status").textContent = "training…";
  setTimeout(() => {
    const r = call(trainingCurves, Number($("tr-seed").value) >>> 0, Number($("tr-epochs").value) >>> 0);
    $("tr-status").textContent = r.err ? "" : "done";
    if (r.err) $("tr-summary").innerHTML = `<p class="error">${r.err}</p>`;
    else renderCurves(r.ok);
  }, 20);
}

await init();
for (const id of ["scores", "ratio"]) $(id).addEventListener("input", renderPlan);
for (const id of ["ck-seed", "ck-mode", "c1", "c2"]) $(id).addEventListener("input", renderCheckpoint);
$("train").addEventListener("click", train);
renderPlan();
renderCheckpoint();
