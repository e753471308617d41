import init, {
  bundled_names,
  bundled_scenario,
  capacity,
  run_scenario,
  throughput_curve,
} from "./pkg/citymesh_wasm.js";

const $ = (id) => document.getElementById(id);
const COLORS = { 8: "#2a7", 16: "#27c", 20: "#c52" };

function drawCurve() {
  const c = $("curve");
  const g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const maxD = Math.min(100, Math.max(1, Number($("max-d").value) || 100));
  const pad = 36;
  const w = c.width - 2 * pad;
  const h = c.height - 2 * pad;
  const lo = 80;
  const hi = 100;
  const y = (k) => pad + h - ((k - lo) / (hi - lo)) * h;

  g.strokeStyle = "#999";
  g.fillStyle = "#555";
  g.font = "11px sans-serif";
  g.strokeRect(pad, pad, w, h);
  for (let k = lo; k <= hi; k += 4) {
    g.fillText(String(k), 6, y(k) + 4);
  }
  g.fillText(`0 m`, pad, c.height - 10);
  g.fillText(`${maxD} m`, pad + w - 30, c.height - 10);
  g.fillText("kbit/s", pad + 4, pad - 8);

  const points = 200;
  let offset = 0;
  for (const box of document.querySelectorAll(".mode")) {
    if (!box.checked) continue;
    const mhz = Number(box.value);
    const ks = throughput_curve(mhz, maxD, points);
    g.strokeStyle = COLORS[mhz];
    g.lineWidth = 2;
    g.setLineDash(offset ? [6, 6] : []);
    g.lineDashOffset = offset * 4;
    g.beginPath();
    ks.forEach((k, i) => {
      const px = pad + ((i + 1) / points) * w;
      i ? g.lineTo(px, y(k)) : g.moveTo(px, y(k));
    });
    g.stroke();
    offset += 1;
  }
  g.setLineDash([]);
}

function showCapacity() {
  const out = $("c-out");
  try {
    const n = capacity(
      Number($("c-sensors").value),
      Number($("c-bits").value),
      Number($("c-interval").value),
      Number($("c-link").value),
    );
    out.className = "";
    out.textContent = `${n} lights fit on one link`;
  } catch (e) {
    out.className = "err";
    out.textContent = String(e.message || e);
  }
}

function drawTimeline(result) {
  const c = $("timeline");
  const rows = result.lights.concat(result.devices);
  c.height = 30 + rows.length * 22;
  const g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const left = 70;
  const w = c.width - left - 10;
  const x = (t) => left + (t / result.end) * w;
  g.font = "11px sans-serif";
  rows.forEach((row, i) => {
    const top = 10 + i * 22;
    g.fillStyle = "#333";
    g.fillText(row.id, 4, top + 13);
    for (const [from, to, mode] of row.segments) {
      g.fillStyle = mode === "emergency" ? "#d64" : "#8ab";
      g.fillRect(x(from), top, Math.max(1, x(to) - x(from)), 16);
    }
    g.fillStyle = "#333";
    for (const [t, source] of result.alerts) {
      if (source === row.id) g.fillRect(x(t) - 1, top - 2, 3, 20);
    }
  });
  g.fillStyle = "#555";
  g.fillText("0 s", left, c.height - 6);
  g.fillText(`${result.end / 1000} s`, left + w - 40, c.height - 6);
}

function runCurrent() {
  const status = $("status");
  try {
    const started = performance.now();
    const result = JSON.parse(run_scenario($("text").value));
    const ms = (performance.now() - started).toFixed(0);
    status.className = "";
    status.textContent = `${result.records} trace records in ${ms} ms`;
    drawTimeline(result);
    $("table").textContent = result.table;
  } catch (e) {
    status.className = "err";
    status.textContent = String(e.message || e);
  }
}

async function main() {
  await init();
  for (const name of bundled_names()) {
    const opt = document.createElement("option");
    opt.value = opt.textContent = name;
    $("pick").appendChild(opt);
  }
  const load = () => {
    $("text").value = bundled_scenario($("pick").value) || "";
    runCurrent();
  };
  $("pick").addEventListener("change", load);
  $("run").addEventListener("click", runCurrent);
  document.querySelectorAll(".mode").forEach((b) => b.addEventListener("change", drawCurve));
  $("max-d").addEventListener("input", drawCurve);
  for (const id of ["c-sensors", "c-bits", "c-interval", "c-link"]) {
    $(id).addEventListener("input", showCapacity);
  }
  drawCurve();
  showCapacity();
  load();
}

main();
