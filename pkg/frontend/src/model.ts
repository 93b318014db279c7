/**
 * Dashboard data model: bridge types, the monotone state order, and the
 * workflow draft with its validation.
 *
 * The dashboard never reinterprets job semantics: every state string it
 * shows came from the bridge. The one rule it enforces locally is that
 * displayed states only ever advance along the monotone order, so a
 * stale poll can never make a badge move backwards.
 */

export interface StatusNode {
  id: string;
  kind: string;
  state: string;
  exit_code?: number;
  detail?: string;
  stdout_ref?: string;
  stderr_ref?: string;
  dispatch_seq?: number;
  started_at?: number;
  finished_at?: number;
  children?: StatusNode[];
}

export interface JobHandle {
  usite: string;
  gateway: string;
  vsite: string;
  job_id: string;
  title: string;
  submitted_at: number;
}

export const STATE_ORDER: Record<string, number> = {
  Pending: 0,
  Ready: 1,
  Staged: 2,
  Submitted: 3,
  Running: 4,
  Done: 5,
  Failed: 5,
  Aborted: 5,
  NotRun: 5,
};

export const TERMINAL_STATES = new Set(["Done", "Failed", "Aborted", "NotRun"]);

export function stateOrder(state: string): number {
  return STATE_ORDER[state] ?? 0;
}

/**
 * Merge a freshly fetched tree into the previously displayed one,
 * keeping the display monotone: a node whose incoming state would move
 * backwards keeps its current state. Structure (new children, e.g. loop
 * iterations) always comes from the fresh tree.
 */
export function mergeMonotone(prev: StatusNode | null, next: StatusNode): StatusNode {
  if (prev === null || prev.id !== next.id) {
    return next;
  }
  const keep = stateOrder(next.state) < stateOrder(prev.state);
  const prevChildren = new Map((prev.children ?? []).map((c) => [c.id, c]));
  const children = (next.children ?? []).map((c) =>
    mergeMonotone(prevChildren.get(c.id) ?? null, c),
  );
  const merged: StatusNode = { ...next, state: keep ? prev.state : next.state };
  if (next.children !== undefined || children.length > 0) {
    merged.children = children;
  }
  return merged;
}

/** Flatten a tree to path -> node (for tests and lookups). */
export function indexTree(node: StatusNode, path = ""): Map<string, StatusNode> {
  const out = new Map<string, StatusNode>();
  out.set(path, node);
  for (const child of node.children ?? []) {
    const childPath = path ? `${path}/${child.id}` : child.id;
    for (const [p, n] of indexTree(child, childPath)) {
      out.set(p, n);
    }
  }
  return out;
}

// --- workflow drafts ---------------------------------------------------------

export interface DraftTask {
  id: string;
  command: string;
  args: string; // space separated, shell-ish
  vsite: string; // empty = submission vsite
  group: string; // empty = top level
  processors: number;
  runtime: number;
  memory: string;
}

export interface DraftGroup {
  id: string;
  kind: "plain" | "conditional" | "repeat";
  predicateChild: string;
  predicateOp: "==" | "!=" | "<";
  predicateValue: number;
  count: number;
}

export interface DraftEdge {
  from: string;
  to: string;
}

export interface WorkflowDraft {
  name: string;
  vsite: string;
  tasks: DraftTask[];
  edges: DraftEdge[];
  groups: DraftGroup[];
}

export interface DraftProblems {
  violations: string[];
  cycleMembers: Set<string>;
}

export function emptyDraft(): WorkflowDraft {
  return { name: "workflow", vsite: "", tasks: [], edges: [], groups: [] };
}

export function newTask(id: string): DraftTask {
  return {
    id,
    command: "echo",
    args: "hello",
    vsite: "",
    group: "",
    processors: 1,
    runtime: 300,
    memory: "256M",
  };
}

const ID_RE = /^[A-Za-z0-9._-]+$/;

/** Find one cycle over the draft's effective dependency graph. */
export function findCycleMembers(tasks: string[], edges: DraftEdge[]): Set<string> {
  const succ = new Map<string, string[]>(tasks.map((t) => [t, []]));
  for (const e of edges) {
    if (succ.has(e.from) && succ.has(e.to)) {
      succ.get(e.from)!.push(e.to);
    }
  }
  const color = new Map<string, number>(tasks.map((t) => [t, 0]));
  const stack: string[] = [];
  let found: string[] | null = null;

  const visit = (n: string): boolean => {
    color.set(n, 1);
    stack.push(n);
    for (const m of succ.get(n) ?? []) {
      if (color.get(m) === 1) {
        found = stack.slice(stack.indexOf(m));
        return true;
      }
      if (color.get(m) === 0 && visit(m)) {
        return true;
      }
    }
    stack.pop();
    color.set(n, 2);
    return false;
  };

  for (const t of tasks) {
    if (color.get(t) === 0 && visit(t)) {
      break;
    }
  }
  return new Set(found ?? []);
}

/** Every problem that would make the export invalid, plus cycle members
 * for highlighting. Empty violations means the draft exports cleanly. */
export function validateDraft(draft: WorkflowDraft): DraftProblems {
  const violations: string[] = [];
  if (!draft.vsite.trim()) {
    violations.push("submission vsite is empty");
  }
  if (draft.tasks.length === 0) {
    violations.push("no tasks");
  }
  const seen = new Set<string>();
  for (const t of draft.tasks) {
    if (!ID_RE.test(t.id)) {
      violations.push(`task id ${JSON.stringify(t.id)} is invalid`);
    }
    if (seen.has(t.id)) {
      violations.push(`duplicate task id ${JSON.stringify(t.id)}`);
    }
    seen.add(t.id);
    if (!t.command.trim()) {
      violations.push(`task ${t.id}: command is empty`);
    }
    if (t.processors < 1 || t.runtime < 1) {
      violations.push(`task ${t.id}: resources must be positive`);
    }
  }
  for (const e of draft.edges) {
    for (const end of [e.from, e.to]) {
      if (!seen.has(end)) {
        violations.push(`dependency references unknown task ${JSON.stringify(end)}`);
      }
    }
    if (e.from === e.to) {
      violations.push(`self-dependency on ${e.from}`);
    }
  }
  const groupIds = new Set<string>();
  for (const g of draft.groups) {
    if (!ID_RE.test(g.id)) {
      violations.push(`group id ${JSON.stringify(g.id)} is invalid`);
    }
    if (groupIds.has(g.id) || seen.has(g.id)) {
      violations.push(`duplicate group id ${JSON.stringify(g.id)}`);
    }
    groupIds.add(g.id);
    const members = draft.tasks.filter((t) => t.group === g.id);
    if (members.length === 0) {
      violations.push(`group ${g.id} has no member tasks`);
    }
    if (g.kind === "conditional" && !members.some((t) => t.id === g.predicateChild)) {
      violations.push(`group ${g.id}: predicate child must be a member task`);
    }
    if (g.kind === "repeat" && g.count < 1) {
      violations.push(`group ${g.id}: repeat count must be >= 1`);
    }
  }
  for (const t of draft.tasks) {
    if (t.group && !groupIds.has(t.group)) {
      violations.push(`task ${t.id} names unknown group ${JSON.stringify(t.group)}`);
    }
  }
  const cycleMembers = findCycleMembers(
    draft.tasks.map((t) => t.id),
    draft.edges,
  );
  if (cycleMembers.size > 0) {
    violations.push(`dependency cycle at [${[...cycleMembers].sort().join(",")}]`);
  }
  return { violations, cycleMembers };
}

/** Serialize a valid draft to the workflow document the bridge accepts. */
export function draftToDocument(draft: WorkflowDraft): object {
  const tasks = draft.tasks.map((t) => {
    const doc: Record<string, unknown> = {
      id: t.id,
      kind: "execute",
      command: t.command.trim(),
      args: t.args.trim() ? t.args.trim().split(/\s+/) : [],
      resources: { processors: t.processors, runtime: t.runtime, memory: t.memory },
    };
    if (t.vsite.trim()) {
      doc.vsite = t.vsite.trim();
    }
    return doc;
  });
  const groups = draft.groups.map((g) => {
    const doc: Record<string, unknown> = {
      id: g.id,
      members: draft.tasks.filter((t) => t.group === g.id).map((t) => t.id),
    };
    if (g.kind === "conditional") {
      doc.control = {
        kind: "conditional",
        predicate: { child_id: g.predicateChild, op: g.predicateOp, value: g.predicateValue },
      };
    } else if (g.kind === "repeat") {
      doc.control = { kind: "repeat", count: g.count };
    }
    return doc;
  });
  return {
    workflow_version: 1,
    name: draft.name || "workflow",
    vsite: draft.vsite.trim(),
    tasks,
    dependencies: draft.edges.map((e) => [e.from, e.to]),
    groups,
  };
}
