import init, { decode_slot, run_scene, associate_parts } from "./pkg/bpjdet_web.js";

const $ = (id) => document.getElementById(id);
const call = (f, req) => JSON.parse(f(JSON.stringify(req)));

let state = null;
let dragging = null;

function corners([cx, cy, w, h]) {
  return [cx - w / 2, cy - h / 2, w, h];
}

function sceneRequest() {
  return {
    seed: Number($("seed").value),
    hands: $("hands").checked,
    crowded: $("crowded").checked,
    noise: Number($("noise").value),
    thresholds: {
      body_conf: Number($("body_conf").value),
      body_iou: 0.6,
      part_conf: 0.1,
      part_iou: 0.3,
      inner_iou: Number($("inner_iou").value),
    },
  };
}

function refreshScene() {
  for (const id of ["noise", "body_conf", "inner_iou"]) $(id + "V").textContent = $(id).value;
  const r = call(run_scene, sceneRequest());
  $("sceneErr").textContent = r.error || "";
  if (r.error) return;
  state = r;
  drawScene();
  showReport(r.report);
}

function relink() {
  const p = state.prediction;
  const r = call(associate_parts, {
    bodies: p.bodies.map((b) => ({ box: b.box, score: b.score, offsets: b.offsets })),
    parts: p.parts,
    inner_iou: Number($("inner_iou").value),
  });
  $("sceneErr").textContent = r.error || "";
  if (r.error) return;
  r.associations.forEach((a, i) => (p.bodies[i].assoc = a));
  drawScene();
}

function drawScene() {
  const c = $("scene");
  const g = c.getContext("2d");
  const a = state.annotation;
  const s = c.width / Math.max(a.width, a.height);
  g.setTransform(1, 0, 0, 1, 0, 0);
  g.clearRect(0, 0, c.width, c.height);
  g.setTransform(s, 0, 0, s, 0, 0);
  g.lineWidth = 1 / s;

  g.setLineDash([3 / s, 3 / s]);
  g.strokeStyle = "#999";
  for (const b of a.bodies) {
    g.strokeRect(...corners(b.box));
    for (const part of b.parts) if (part.box) g.strokeRect(...corners(part.box));
  }
  for (const o of a.orphan_parts) g.strokeRect(...corners(o.box));
  g.setLineDash([]);

  const p = state.prediction;
  g.lineWidth = 2 / s;
  g.strokeStyle = "#d62728";
  for (const part of p.parts) g.strokeRect(...corners(part.box));
  for (const b of p.bodies) {
    g.strokeStyle = "#1f77b4";
    g.strokeRect(...corners(b.box));
    b.offsets.forEach((pt, slot) => {
      const linked = b.assoc[slot];
      g.strokeStyle = "#2ca02c";
      if (linked !== null && linked !== undefined) {
        const q = p.parts[linked].box;
        g.beginPath();
        g.moveTo(b.box[0], b.box[1]);
        g.lineTo(q[0], q[1]);
        g.stroke();
      }
      g.beginPath();
      g.arc(pt[0], pt[1], 3.5 / s, 0, 2 * Math.PI);
      g.fillStyle = "#fff";
      g.fill();
      g.strokeStyle = "#1f77b4";
      g.stroke();
    });
  }
}

function showReport(r) {
  const rows = [
    ["body AP", r.ap_body],
    ["part AP", r.ap_part],
    ["body MR-2", r.mr2_body],
    ["mean mMR-2", r.mmr2],
    ["cond. accuracy", r.cond_accuracy],
    ["joint AP", r.joint_ap],
    ["link precision", r.association.precision],
    ["link recall", r.association.recall],
  ];
  $("report").innerHTML = rows
    .map(([k, v]) => `<tr><th>${k}</th><td>${typeof v === "number" ? v.toFixed(4) : "-"}</td></tr>`)
    .join("");
}

function scenePoint(ev) {
  const c = $("scene");
  const rect = c.getBoundingClientRect();
  const a = state.annotation;
  const s = c.width / Math.max(a.width, a.height);
  return [((ev.clientX - rect.left) * (c.width / rect.width)) / s, ((ev.clientY - rect.top) * (c.height / rect.height)) / s, s];
}

function hookDragging() {
  const c = $("scene");
  c.addEventListener("pointerdown", (ev) => {
    if (!state) return;
    const [x, y, s] = scenePoint(ev);
    let best = null;
    state.prediction.bodies.forEach((b, bi) =>
      b.offsets.forEach((pt, slot) => {
        const d = Math.hypot(pt[0] - x, pt[1] - y);
        if (d < 8 / s && (!best || d < best.d)) best = { d, bi, slot };
      })
    );
    if (best) {
      dragging = best;
      c.setPointerCapture(ev.pointerId);
    }
  });
  c.addEventListener("pointermove", (ev) => {
    if (!dragging) return;
    const [x, y] = scenePoint(ev);
    state.prediction.bodies[dragging.bi].offsets[dragging.slot] = [x, y];
    relink();
  });
  c.addEventListener("pointerup", () => (dragging = null));
}

function refreshSlot() {
  for (const id of ["aw", "ah", "tx", "ty", "tw", "th", "ox", "oy"]) $(id + "V").textContent = $(id).value;
  const req = {
    raw_box: ["tx", "ty", "tw", "th"].map((id) => Number($(id).value)),
    raw_offsets: [Number($("ox").value), Number($("oy").value)],
    anchor: [Number($("aw").value), Number($("ah").value)],
    stride: Number($("stride").value),
  };
  const r = call(decode_slot, req);
  if (r.error) {
    $("slotOut").textContent = r.error;
    return;
  }
  $("slotOut").textContent =
    `box (cells)  cx ${r.box[0].toFixed(3)}  cy ${r.box[1].toFixed(3)}  w ${r.box[2].toFixed(3)}  h ${r.box[3].toFixed(3)}\n` +
    `offset (cells)  ${r.offsets[0][0].toFixed(3)}, ${r.offsets[0][1].toFixed(3)}`;

  const c = $("slot");
  const g = c.getContext("2d");
  const [sw, sh] = r.bounds.size;
  const span = Math.max(sw, sh, 2) + 2;
  const s = c.width / span;
  const o = c.width / 2;
  const X = (v) => o + (v - 0.5) * s;
  g.clearRect(0, 0, c.width, c.height);
  g.strokeStyle = "#ddd";
  for (let i = -Math.ceil(span); i <= Math.ceil(span); i++) {
    g.beginPath(); g.moveTo(X(i), 0); g.lineTo(X(i), c.height); g.stroke();
    g.beginPath(); g.moveTo(0, X(i)); g.lineTo(c.width, X(i)); g.stroke();
  }
  g.fillStyle = "rgba(31,119,180,0.12)";
  g.fillRect(X(0), X(0), s, s);
  g.setLineDash([4, 4]);
  g.strokeStyle = "#888";
  g.strokeRect(X(-0.5), X(-0.5), 2 * s, 2 * s);
  g.strokeRect(X(0.5 - sw / 2), X(0.5 - sh / 2), sw * s, sh * s);
  g.setLineDash([]);
  const [cx, cy, w, h] = r.box;
  g.strokeStyle = "#1f77b4";
  g.lineWidth = 2;
  g.strokeRect(X(cx - w / 2), X(cy - h / 2), w * s, h * s);
  g.lineWidth = 1;
  g.beginPath();
  g.arc(X(cx), X(cy), 3, 0, 2 * Math.PI);
  g.fillStyle = "#1f77b4";
  g.fill();
  const [px, py] = r.offsets[0];
  g.strokeStyle = "#2ca02c";
  g.beginPath(); g.moveTo(X(0.5), X(0.5)); g.lineTo(X(0.5 + px), X(0.5 + py)); g.stroke();
  g.beginPath(); g.arc(X(0.5 + px), X(0.5 + py), 4, 0, 2 * Math.PI); g.stroke();
}

await init();
for (const id of ["seed", "hands", "crowded", "noise", "body_conf", "inner_iou"]) $(id).addEventListener("input", refreshScene);
for (const id of ["aw", "ah", "stride", "tx", "ty", "tw", "th", "ox", "oy"]) $(id).addEventListener("input", refreshSlot);
hookDragging();
refreshScene();
refreshSlot();
