/**
 * Dashboard page wiring: compose a workflow, submit it through the
 * bridge, watch the recursive status tree live, abort, read outputs.
 *
 * One poll is in flight per watched job; displayed states only advance
 * (monotone merge); a bridge hiccup shows a stale-data indicator and
 * retries with backoff instead of blanking the tree.
 */

import { BridgeClient, BridgeError } from "./api.js";
import {
  DraftEdge,
  DraftGroup,
  DraftTask,
  JobHandle,
  StatusNode,
  WorkflowDraft,
  draftToDocument,
  emptyDraft,
  mergeMonotone,
  newTask,
  validateDraft,
} from "./model.js";
import { renderNode } from "./tree.js";

const POLL_INTERVAL_MS = 2000;
const MAX_BACKOFF_MS = 30000;

interface WatchState {
  jobId: string;
  tree: StatusNode | null;
  timer: number | null;
  backoff: number;
  stale: boolean;
}

export class App {
  draft: WorkflowDraft = emptyDraft();
  watch: WatchState | null = null;

  constructor(
    private doc: Document,
    private client: BridgeClient,
  ) {}

  mount(root: HTMLElement): void {
    root.innerHTML = "";
    root.appendChild(this.composeSection());
    root.appendChild(this.jobsSection());
    root.appendChild(this.watchSection());
    void this.refreshJobs();
    this.renderDraft();
  }

  // --- compose -------------------------------------------------------------

  private el<K extends keyof HTMLElementTagNameMap>(
    tag: K,
    className?: string,
    text?: string,
  ): HTMLElementTagNameMap[K] {
    const node = this.doc.createElement(tag);
    if (className) {
      node.className = className;
    }
    if (text !== undefined) {
      node.textContent = text;
    }
    return node;
  }

  private composeSection(): HTMLElement {
    const section = this.el("section", "compose");
    section.id = "compose";
    section.appendChild(this.el("h2", "", "Compose"));

    const meta = this.el("div", "compose-meta");
    meta.appendChild(this.labelled("name", "workflow name", this.draftNameInput()));
    meta.appendChild(this.labelled("vsite", "submission vsite", this.draftVsiteInput()));
    meta.appendChild(this.labelled("gateway", "gateway (usite)", this.textInput("gateway", "")));
    section.appendChild(meta);

    section.appendChild(this.el("h3", "", "Tasks"));
    const tasks = this.el("div");
    tasks.id = "task-table";
    section.appendChild(tasks);
    const addTask = this.el("button", "", "add task");
    addTask.id = "add-task";
    addTask.onclick = () => {
      this.draft.tasks.push(newTask(`task-${this.draft.tasks.length + 1}`));
      this.renderDraft();
    };
    section.appendChild(addTask);

    section.appendChild(this.el("h3", "", "Dependencies"));
    const edges = this.el("div");
    edges.id = "edge-table";
    section.appendChild(edges);
    const addEdge = this.el("button", "", "add dependency");
    addEdge.id = "add-edge";
    addEdge.onclick = () => {
      this.draft.edges.push({ from: "", to: "" });
      this.renderDraft();
    };
    section.appendChild(addEdge);

    section.appendChild(this.el("h3", "", "Groups"));
    const groups = this.el("div");
    groups.id = "group-table";
    section.appendChild(groups);
    const addGroup = this.el("button", "", "add group");
    addGroup.id = "add-group";
    addGroup.onclick = () => {
      this.draft.groups.push({
        id: `group-${this.draft.groups.length + 1}`,
        kind: "plain",
        predicateChild: "",
        predicateOp: "==",
        predicateValue: 0,
        count: 2,
      });
      this.renderDraft();
    };
    section.appendChild(addGroup);

    const problems = this.el("ul", "violations");
    problems.id = "violations";
    section.appendChild(problems);

    const banner = this.el("div", "banner hidden");
    banner.id = "submit-banner";
    section.appendChild(banner);

    const submit = this.el("button", "", "submit");
    submit.id = "submit";
    submit.onclick = () => void this.submitDraft();
    section.appendChild(submit);
    return section;
  }

  private labelled(id: string, label: string, input: HTMLElement): HTMLElement {
    const wrap = this.el("label", "field");
    wrap.appendChild(this.el("span", "", label));
    input.id = id;
    wrap.appendChild(input);
    return wrap;
  }

  private textInput(id: string, value: string): HTMLInputElement {
    const input = this.el("input");
    input.id = id;
    input.value = value;
    return input;
  }

  private draftNameInput(): HTMLInputElement {
    const input = this.textInput("name", this.draft.name);
    input.oninput = () => {
      this.draft.name = input.value;
      this.renderProblems();
    };
    return input;
  }

  private draftVsiteInput(): HTMLInputElement {
    const input = this.textInput("vsite", this.draft.vsite);
    input.oninput = () => {
      this.draft.vsite = input.value;
      this.renderProblems();
    };
    return input;
  }

  renderDraft(): void {
    this.renderTaskTable();
    this.renderEdgeTable();
    this.renderGroupTable();
    this.renderProblems();
  }

  private boundInput(
    value: string | number,
    apply: (v: string) => void,
    className: string,
  ): HTMLInputElement {
    const input = this.el("input", className);
    input.value = String(value);
    input.oninput = () => {
      apply(input.value);
      this.renderProblems();
    };
    return input;
  }

  private renderTaskTable(): void {
    const host = this.doc.getElementById("task-table")!;
    host.innerHTML = "";
    const table = this.el("table");
    const head = this.el("tr");
    for (const col of ["id", "command", "args", "vsite", "group", "procs", "runtime", "memory", ""]) {
      head.appendChild(this.el("th", "", col));
    }
    table.appendChild(head);
    this.draft.tasks.forEach((task, i) => {
      const row = this.el("tr", "task-row");
      row.dataset.taskId = task.id;
      const cells: HTMLElement[] = [
        this.boundInput(task.id, (v) => (task.id = v), "t-id"),
        this.boundInput(task.command, (v) => (task.command = v), "t-command"),
        this.boundInput(task.args, (v) => (task.args = v), "t-args"),
        this.boundInput(task.vsite, (v) => (task.vsite = v), "t-vsite"),
        this.boundInput(task.group, (v) => (task.group = v), "t-group"),
        this.boundInput(task.processors, (v) => (task.processors = Number(v) || 0), "t-procs"),
        this.boundInput(task.runtime, (v) => (task.runtime = Number(v) || 0), "t-runtime"),
        this.boundInput(task.memory, (v) => (task.memory = v), "t-memory"),
      ];
      for (const c of cells) {
        const td = this.el("td");
        td.appendChild(c);
        row.appendChild(td);
      }
      const remove = this.el("button", "", "remove");
      remove.onclick = () => {
        this.draft.tasks.splice(i, 1);
        this.renderDraft();
      };
      const td = this.el("td");
      td.appendChild(remove);
      row.appendChild(td);
      table.appendChild(row);
    });
    host.appendChild(table);
  }

  private renderEdgeTable(): void {
    const host = this.doc.getElementById("edge-table")!;
    host.innerHTML = "";
    const table = this.el("table");
    this.draft.edges.forEach((edge, i) => {
      const row = this.el("tr", "edge-row");
      const from = this.el("td");
      from.appendChild(this.boundInput(edge.from, (v) => (edge.from = v), "e-from"));
      const arrow = this.el("td", "", "→");
      const to = this.el("td");
      to.appendChild(this.boundInput(edge.to, (v) => (edge.to = v), "e-to"));
      const remove = this.el("button", "", "remove");
      remove.onclick = () => {
        this.draft.edges.splice(i, 1);
        this.renderDraft();
      };
      const rm = this.el("td");
      rm.appendChild(remove);
      for (const td of [from, arrow, to, rm]) {
        row.appendChild(td);
      }
      table.appendChild(row);
    });
    host.appendChild(table);
  }

  private renderGroupTable(): void {
    const host = this.doc.getElementById("group-table")!;
    host.innerHTML = "";
    const table = this.el("table");
    this.draft.groups.forEach((group, i) => {
      const row = this.el("tr", "group-row");
      const id = this.el("td");
      id.appendChild(this.boundInput(group.id, (v) => (group.id = v), "g-id"));
      const kind = this.el("td");
      const select = this.el("select", "g-kind") as HTMLSelectElement;
      for (const k of ["plain", "conditional", "repeat"]) {
        const opt = this.el("option", "", k) as HTMLOptionElement;
        opt.value = k;
        select.appendChild(opt);
      }
      select.value = group.kind;
      select.onchange = () => {
        group.kind = select.value as DraftGroup["kind"];
        this.renderProblems();
      };
      kind.appendChild(select);
      const pred = this.el("td");
      pred.appendChild(
        this.boundInput(group.predicateChild, (v) => (group.predicateChild = v), "g-pred-child"),
      );
      const count = this.el("td");
      count.appendChild(this.boundInput(group.count, (v) => (group.count = Number(v) || 0), "g-count"));
      const remove = this.el("button", "", "remove");
      remove.onclick = () => {
        this.draft.groups.splice(i, 1);
        this.renderDraft();
      };
      const rm = this.el("td");
      rm.appendChild(remove);
      for (const td of [id, kind, pred, count, rm]) {
        row.appendChild(td);
      }
      table.appendChild(row);
    });
    host.appendChild(table);
  }

  /** Re-evaluate the draft: list violations, highlight cycle members,
   * enable the submit button only when the export is valid. */
  renderProblems(): void {
    const problems = validateDraft(this.draft);
    const list = this.doc.getElementById("violations")!;
    list.innerHTML = "";
    for (const v of problems.violations) {
      list.appendChild(this.el("li", "violation", v));
    }
    const submit = this.doc.getElementById("submit") as HTMLButtonElement;
    submit.disabled = problems.violations.length > 0;
    for (const row of this.doc.querySelectorAll<HTMLElement>(".task-row")) {
      row.classList.toggle("cycle-member", problems.cycleMembers.has(row.dataset.taskId ?? ""));
    }
  }

  async submitDraft(): Promise<void> {
    const banner = this.doc.getElementById("submit-banner")!;
    banner.className = "banner hidden";
    const gateway = (this.doc.getElementById("gateway") as HTMLInputElement).value.trim();
    try {
      const handle = await this.client.submit(
        draftToDocument(this.draft),
        gateway,
        this.draft.vsite.trim(),
        this.draft.name,
      );
      banner.className = "banner ok";
      banner.textContent = `submitted: ${handle.job_id}`;
      await this.refreshJobs();
      this.startWatch(handle.job_id);
    } catch (err) {
      // the draft stays as it is; show the server's reason
      banner.className = "banner error";
      banner.textContent =
        err instanceof BridgeError ? `${err.code}: ${err.detail}` : String(err);
    }
  }

  // --- job list ---------------------------------------------------------------

  private jobsSection(): HTMLElement {
    const section = this.el("section", "jobs");
    section.appendChild(this.el("h2", "", "Jobs"));
    const refresh = this.el("button", "", "refresh");
    refresh.id = "refresh-jobs";
    refresh.onclick = () => void this.refreshJobs();
    section.appendChild(refresh);
    const list = this.el("div");
    list.id = "job-list";
    section.appendChild(list);
    return section;
  }

  async refreshJobs(): Promise<void> {
    const host = this.doc.getElementById("job-list")!;
    let jobs: JobHandle[];
    try {
      jobs = await this.client.jobs();
    } catch {
      return; // keep the previous listing on a hiccup
    }
    host.innerHTML = "";
    for (const job of jobs.slice().reverse()) {
      const row = this.el("div", "job-row");
      row.dataset.jobId = job.job_id;
      row.appendChild(this.el("code", "job-id", job.job_id.slice(0, 12)));
      row.appendChild(this.el("span", "job-title", job.title || "(untitled)"));
      row.appendChild(this.el("span", "job-vsite", `${job.vsite} via ${job.usite}`));
      const watch = this.el("button", "watch-button", "watch");
      watch.onclick = () => this.startWatch(job.job_id);
      row.appendChild(watch);
      host.appendChild(row);
    }
  }

  // --- watcher -----------------------------------------------------------------

  private watchSection(): HTMLElement {
    const section = this.el("section", "watch");
    section.appendChild(this.el("h2", "", "Watch"));
    const header = this.el("div", "watch-header");
    const name = this.el("code");
    name.id = "watch-job";
    header.appendChild(name);
    const stale = this.el("span", "stale-indicator hidden", "stale data: retrying");
    stale.id = "stale";
    header.appendChild(stale);
    const abort = this.el("button", "", "abort");
    abort.id = "abort";
    abort.onclick = () => void this.abortWatched();
    header.appendChild(abort);
    section.appendChild(header);
    const tree = this.el("div");
    tree.id = "tree";
    section.appendChild(tree);

    const outputs = this.el("div", "outputs");
    const taskInput = this.textInput("output-task", "");
    taskInput.placeholder = "task path";
    outputs.appendChild(taskInput);
    const streamSelect = this.el("select") as HTMLSelectElement;
    streamSelect.id = "output-stream";
    for (const s of ["stdout", "stderr"]) {
      const opt = this.el("option", "", s) as HTMLOptionElement;
      opt.value = s;
      streamSelect.appendChild(opt);
    }
    outputs.appendChild(streamSelect);
    const fetchButton = this.el("button", "", "fetch output");
    fetchButton.id = "fetch-output";
    fetchButton.onclick = () => void this.fetchOutput();
    outputs.appendChild(fetchButton);
    const panel = this.el("pre", "output-panel");
    panel.id = "output-panel";
    outputs.appendChild(panel);
    section.appendChild(outputs);
    return section;
  }

  startWatch(jobId: string): void {
    this.stopWatch();
    this.watch = { jobId, tree: null, timer: null, backoff: POLL_INTERVAL_MS, stale: false };
    this.doc.getElementById("watch-job")!.textContent = jobId;
    void this.pollOnce();
  }

  stopWatch(): void {
    if (this.watch?.timer !== null && this.watch !== null) {
      clearTimeout(this.watch.timer as unknown as number);
    }
    this.watch = null;
  }

  /** One poll; reschedules itself. Public so tests can drive it. */
  async pollOnce(): Promise<void> {
    const watch = this.watch;
    if (!watch) {
      return;
    }
    try {
      const fresh = await this.client.status(watch.jobId);
      watch.tree = mergeMonotone(watch.tree, fresh);
      watch.stale = false;
      watch.backoff = POLL_INTERVAL_MS;
      this.renderWatchedTree();
    } catch {
      watch.stale = true;
      watch.backoff = Math.min(watch.backoff * 2, MAX_BACKOFF_MS);
      this.renderStale();
    }
    watch.timer = setTimeout(() => void this.pollOnce(), watch.backoff) as unknown as number;
  }

  renderWatchedTree(): void {
    const host = this.doc.getElementById("tree")!;
    host.innerHTML = "";
    if (this.watch?.tree) {
      host.appendChild(renderNode(this.doc, this.watch.tree));
    }
    this.renderStale();
  }

  private renderStale(): void {
    const stale = this.doc.getElementById("stale")!;
    stale.className = this.watch?.stale ? "stale-indicator" : "stale-indicator hidden";
  }

  async abortWatched(): Promise<void> {
    if (!this.watch) {
      return;
    }
    const view = this.doc.defaultView;
    if (view && !view.confirm(`abort job ${this.watch.jobId}?`)) {
      return;
    }
    await this.client.abort(this.watch.jobId);
    await this.pollNow();
  }

  /** Immediate extra poll (after user actions). */
  async pollNow(): Promise<void> {
    const watch = this.watch;
    if (!watch) {
      return;
    }
    if (watch.timer !== null) {
      clearTimeout(watch.timer as unknown as number);
      watch.timer = null;
    }
    await this.pollOnce();
  }

  async fetchOutput(): Promise<void> {
    if (!this.watch) {
      return;
    }
    const task = (this.doc.getElementById("output-task") as HTMLInputElement).value.trim();
    const stream = (this.doc.getElementById("output-stream") as HTMLSelectElement).value as
      | "stdout"
      | "stderr";
    const panel = this.doc.getElementById("output-panel")!;
    try {
      panel.textContent = await this.client.output(this.watch.jobId, task, stream);
    } catch (err) {
      panel.textContent = err instanceof BridgeError ? `${err.code}: ${err.detail}` : String(err);
    }
  }
}

export function boot(doc: Document, baseUrl = ""): App {
  const app = new App(doc, new BridgeClient(baseUrl));
  const root = doc.getElementById("app");
  if (root) {
    app.mount(root);
  }
  return app;
}
