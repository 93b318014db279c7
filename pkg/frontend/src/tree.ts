/**
 * Status tree rendering: a pure projection of the bridge's recursion
 * tree into DOM. No job semantics live here; the state string on every
 * badge is exactly what the bridge sent (after the monotone merge).
 */

import type { StatusNode } from "./model.js";
import { TERMINAL_STATES } from "./model.js";

function badge(doc: Document, state: string): HTMLElement {
  const el = doc.createElement("span");
  el.className = `badge state-${state.toLowerCase()}`;
  el.textContent = state;
  return el;
}

function stamp(ts?: number): string {
  if (ts === undefined) {
    return "";
  }
  return new Date(ts * 1000).toLocaleTimeString();
}

function nodeLine(doc: Document, node: StatusNode, path: string): HTMLElement {
  const line = doc.createElement("div");
  line.className = "node-line";
  line.dataset.path = path;
  line.dataset.state = node.state;

  const name = doc.createElement("span");
  name.className = "node-id";
  name.textContent = node.id;
  line.appendChild(name);

  const kind = doc.createElement("span");
  kind.className = "node-kind";
  kind.textContent = node.kind;
  line.appendChild(kind);

  line.appendChild(badge(doc, node.state));

  if (node.exit_code !== undefined && node.exit_code !== null) {
    const exit = doc.createElement("span");
    exit.className = "node-exit";
    exit.textContent = `exit ${node.exit_code}`;
    line.appendChild(exit);
  }
  if (node.detail) {
    const detail = doc.createElement("span");
    detail.className = "node-detail";
    detail.textContent = node.detail;
    line.appendChild(detail);
  }
  const times = doc.createElement("span");
  times.className = "node-times";
  const started = stamp(node.started_at);
  const finished = stamp(node.finished_at);
  times.textContent = started || finished ? `${started}${finished ? " → " + finished : ""}` : "";
  line.appendChild(times);
  return line;
}

/** Render one node (and its recursion) into an element tree.
 * Groups become <details> so they expand and collapse. */
export function renderNode(doc: Document, node: StatusNode, path = ""): HTMLElement {
  if (node.kind !== "group") {
    const leaf = doc.createElement("div");
    leaf.className = "tree-leaf";
    leaf.appendChild(nodeLine(doc, node, path));
    return leaf;
  }
  const details = doc.createElement("details");
  details.className = "tree-group";
  details.open = !TERMINAL_STATES.has(node.state) || node.state !== "Done";
  const summary = doc.createElement("summary");
  summary.appendChild(nodeLine(doc, node, path));
  details.appendChild(summary);
  const children = doc.createElement("div");
  children.className = "tree-children";
  for (const child of node.children ?? []) {
    const childPath = path ? `${path}/${child.id}` : child.id;
    children.appendChild(renderNode(doc, child, childPath));
  }
  details.appendChild(children);
  return details;
}

export interface RenderedNode {
  path: string;
  id: string;
  kind: string;
  state: string;
  exit?: string;
}

/** Read a rendered tree back out of the DOM (test instrumentation). */
export function readRendered(root: Element): RenderedNode[] {
  const out: RenderedNode[] = [];
  for (const line of root.querySelectorAll<HTMLElement>(".node-line")) {
    out.push({
      path: line.dataset.path ?? "",
      id: line.querySelector(".node-id")?.textContent ?? "",
      kind: line.querySelector(".node-kind")?.textContent ?? "",
      state: line.dataset.state ?? "",
      exit: line.querySelector(".node-exit")?.textContent ?? undefined,
    });
  }
  return out;
}
