// @vitest-environment jsdom
import { beforeEach, describe, expect, it, vi } from "vitest";
import { App } from "../src/app.js";
import { BridgeClient, BridgeError } from "../src/api.js";
import type { JobHandle, StatusNode } from "../src/model.js";
import { newTask, stateOrder } from "../src/model.js";

import framesJson from "./fixtures/tree-sequence.json";

const frames = framesJson as unknown as StatusNode[];

class StubClient extends BridgeClient {
  handles: JobHandle[] = [];
  frames: StatusNode[] = [];
  cursor = 0;
  failStatus = false;
  submitError: BridgeError | null = null;
  aborted: string[] = [];

  override async jobs(): Promise<JobHandle[]> {
    return this.handles;
  }

  override async submit(_doc: object, gateway: string, vsite: string, title: string): Promise<JobHandle> {
    if (this.submitError) {
      throw this.submitError;
    }
    const handle: JobHandle = {
      usite: gateway, gateway, vsite, job_id: `job-${this.handles.length + 1}`,
      title, submitted_at: 0,
    };
    this.handles.push(handle);
    return handle;
  }

  override async status(_jobId: string): Promise<StatusNode> {
    if (this.failStatus) {
      throw new BridgeError(502, "transport", "bridge unreachable");
    }
    const frame = this.frames[Math.min(this.cursor, this.frames.length - 1)];
    this.cursor += 1;
    return structuredClone(frame);
  }

  override async abort(jobId: string): Promise<void> {
    this.aborted.push(jobId);
  }

  override async output(): Promise<string> {
    return "hello\n";
  }
}

function mountApp(): { app: App; client: StubClient } {
  document.body.innerHTML = '<div id="app"></div>';
  const client = new StubClient();
  const app = new App(document, client);
  app.mount(document.getElementById("app")!);
  return { app, client };
}

function badgeStates(): Map<string, string> {
  const out = new Map<string, string>();
  for (const line of document.querySelectorAll<HTMLElement>("#tree .node-line")) {
    out.set(line.dataset.path ?? "", line.dataset.state ?? "");
  }
  return out;
}

describe("compose form", () => {
  beforeEach(() => {
    vi.useRealTimers();
  });

  it("submit is disabled while the draft is invalid, with violations listed", () => {
    const { app } = mountApp();
    const submit = document.getElementById("submit") as HTMLButtonElement;
    expect(submit.disabled).toBe(true); // empty draft: no tasks, no vsite
    const listed = document.getElementById("violations")!.textContent!;
    expect(listed).toContain("no tasks");

    app.draft.vsite = "v1";
    app.draft.tasks.push(newTask("a"));
    app.renderDraft();
    expect((document.getElementById("submit") as HTMLButtonElement).disabled).toBe(false);
  });

  it("a cycle disables export and highlights its members", () => {
    const { app } = mountApp();
    app.draft.vsite = "v1";
    app.draft.tasks.push(newTask("a"), newTask("b"), newTask("c"));
    app.draft.edges.push({ from: "a", to: "b" }, { from: "b", to: "a" });
    app.renderDraft();
    expect((document.getElementById("submit") as HTMLButtonElement).disabled).toBe(true);
    const highlighted = [...document.querySelectorAll<HTMLElement>(".task-row.cycle-member")].map(
      (r) => r.dataset.taskId,
    );
    expect(highlighted.sort()).toEqual(["a", "b"]);
    expect(document.getElementById("violations")!.textContent).toContain("cycle at [a,b]");

    app.draft.edges.pop(); // break the cycle
    app.renderDraft();
    expect((document.getElementById("submit") as HTMLButtonElement).disabled).toBe(false);
    expect(document.querySelectorAll(".cycle-member").length).toBe(0);
  });

  it("a server rejection lands in the banner and keeps the draft", async () => {
    const { app, client } = mountApp();
    app.draft.vsite = "v1";
    app.draft.tasks.push(newTask("a"));
    (document.getElementById("gateway") as HTMLInputElement).value = "FZJ";
    client.submitError = new BridgeError(422, "rejected-unsatisfiable", "64 processors against 8");
    await app.submitDraft();
    const banner = document.getElementById("submit-banner")!;
    expect(banner.className).toContain("error");
    expect(banner.textContent).toContain("rejected-unsatisfiable");
    expect(app.draft.tasks).toHaveLength(1); // draft preserved
  });

  it("a successful submit appears in the job list", async () => {
    vi.useFakeTimers();
    const { app, client } = mountApp();
    client.frames = frames;
    app.draft.vsite = "v1";
    app.draft.tasks.push(newTask("a"));
    (document.getElementById("gateway") as HTMLInputElement).value = "FZJ";
    await app.submitDraft();
    expect(document.querySelectorAll("#job-list .job-row")).toHaveLength(1);
    expect(document.getElementById("watch-job")!.textContent).toBe("job-1");
    app.stopWatch();
  });
});

describe("watcher", () => {
  it("replayed live run only advances badges along the monotone order", async () => {
    vi.useFakeTimers();
    const { app, client } = mountApp();
    // deliver the recorded run with a stale frame re-delivered in the middle
    client.frames = [frames[0], frames[1], frames[2], frames[0], frames[3], frames[4]];
    app.startWatch("job-x");
    let previous: Map<string, string> | null = null;
    for (let i = 0; i < client.frames.length; i++) {
      await app.pollNow();
      const current = badgeStates();
      expect(current.size).toBeGreaterThan(0);
      if (previous) {
        for (const [path, state] of current) {
          const before = previous.get(path);
          if (before !== undefined) {
            expect(
              stateOrder(state),
              `${path} regressed ${before} -> ${state} at frame ${i}`,
            ).toBeGreaterThanOrEqual(stateOrder(before));
          }
        }
      }
      previous = current;
    }
    // final badges match the final frame
    expect(badgeStates().get("")).toBe("Failed");
    expect(badgeStates().get("never")).toBe("NotRun");
    app.stopWatch();
  });

  it("bridge failure shows the stale indicator and recovers", async () => {
    vi.useFakeTimers();
    const { app, client } = mountApp();
    client.frames = frames;
    app.startWatch("job-x");
    await app.pollNow();
    expect(document.getElementById("stale")!.className).toContain("hidden");
    client.failStatus = true;
    await app.pollNow();
    expect(document.getElementById("stale")!.className).not.toContain("hidden");
    // the last good tree is still on screen
    expect(badgeStates().size).toBeGreaterThan(0);
    client.failStatus = false;
    await app.pollNow();
    expect(document.getElementById("stale")!.className).toContain("hidden");
    app.stopWatch();
  });

  it("abort asks for confirmation and calls the bridge", async () => {
    vi.useFakeTimers();
    const { app, client } = mountApp();
    client.frames = frames;
    app.startWatch("job-x");
    await app.pollNow();
    const confirmSpy = vi.spyOn(window, "confirm").mockReturnValue(false);
    await app.abortWatched();
    expect(client.aborted).toEqual([]);
    confirmSpy.mockReturnValue(true);
    await app.abortWatched();
    expect(client.aborted).toEqual(["job-x"]);
    confirmSpy.mockRestore();
    app.stopWatch();
  });
});
