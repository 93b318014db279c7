// @vitest-environment jsdom
import { describe, expect, it } from "vitest";
import type { StatusNode } from "../src/model.js";
import { indexTree } from "../src/model.js";
import { readRendered, renderNode } from "../src/tree.js";

import finalJson from "./fixtures/tree-final.json";

const finalTree = finalJson as unknown as StatusNode;
import framesJson from "./fixtures/tree-sequence.json";

const frames = framesJson as unknown as StatusNode[];

describe("renderNode", () => {
  it("renders a tree isomorphic to the recorded fixture", () => {
    const el = renderNode(document, finalTree);
    const rendered = readRendered(el);
    const want = [...indexTree(finalTree).entries()];
    expect(rendered.length).toBe(want.length);
    // same paths in the same (preorder) order, same ids, states, kinds
    expect(rendered.map((r) => r.path)).toEqual(want.map(([p]) => p));
    for (let i = 0; i < rendered.length; i++) {
      const [, node] = want[i];
      expect(rendered[i].id).toBe(node.id);
      expect(rendered[i].kind).toBe(node.kind);
      expect(rendered[i].state).toBe(node.state);
    }
  });

  it("is isomorphic for every recorded frame", () => {
    for (const frame of frames) {
      const rendered = readRendered(renderNode(document, frame));
      const want = indexTree(frame);
      expect(rendered.length).toBe(want.size);
      for (const r of rendered) {
        const node = want.get(r.path)!;
        expect(node).toBeDefined();
        expect(r.state).toBe(node.state);
      }
    }
  });

  it("shows exit codes verbatim", () => {
    const rendered = readRendered(renderNode(document, finalTree));
    const boom = rendered.find((r) => r.id === "boom")!;
    expect(boom.exit).toBe("exit 2");
  });

  it("groups are expandable details elements", () => {
    const host = document.createElement("div");
    host.appendChild(renderNode(document, finalTree));
    const groups = host.querySelectorAll("details.tree-group");
    const groupCount = [...indexTree(finalTree).values()].filter((n) => n.kind === "group").length;
    expect(groups.length).toBe(groupCount);
  });

  it("displays only state strings the bridge produced", () => {
    for (const frame of frames) {
      const fromBridge = new Set([...indexTree(frame).values()].map((n) => n.state));
      for (const r of readRendered(renderNode(document, frame))) {
        expect(fromBridge.has(r.state)).toBe(true);
      }
    }
  });
});
