/** Console state and its reducer.
 *
 * Every pane is a pure fold over data received from the server: stream
 * entries are applied exactly once (deduplicated by seq) in stream order,
 * and nothing is predicted client-side. Bindings are recovered from
 * (instruction, dispatch_result) correlation pairs; an announcement that
 * was triggered after a device event surfaced is treated as an alert.
 */

import type {
  Connection,
  DispatchResultEntry,
  InstructionEntry,
  LogEntry,
  RoleBinding,
  StateChangeEntry,
} from "./types.js";

interface PendingInstruction {
  role: string;
  verb: string;
  text: string | null;
  afterEvent: boolean;
}

export interface ConsoleState {
  sessionId: string | null;
  sessionState: string;
  failureReason: string | null;
  bindings: Record<string, RoleBinding>;
  displayText: string | null;
  announcements: string[];
  alert: string | null;
  heading: string;
  connection: Connection;
  entries: LogEntry[];
  seenSeqs: Set<number>;
  eventSeen: boolean;
  pending: Record<string, PendingInstruction>;
}

export function initialState(): ConsoleState {
  return {
    sessionId: null,
    sessionState: "",
    failureReason: null,
    bindings: {},
    displayText: null,
    announcements: [],
    alert: null,
    heading: "east",
    connection: "offline",
    entries: [],
    seenSeqs: new Set(),
    eventSeen: false,
    pending: {},
  };
}

export function sessionStarted(state: ConsoleState, sessionId: string): ConsoleState {
  const fresh = initialState();
  return { ...fresh, sessionId, heading: state.heading, connection: "connecting" };
}

export function connectionChanged(state: ConsoleState, connection: Connection): ConsoleState {
  return { ...state, connection };
}

export function headingConfirmed(state: ConsoleState, heading: string): ConsoleState {
  return { ...state, heading };
}

/** Fold one stream entry into the state; entries already seen are no-ops. */
export function applyEntry(state: ConsoleState, entry: LogEntry): ConsoleState {
  if (typeof entry.seq !== "number" || state.seenSeqs.has(entry.seq)) {
    return state;
  }
  const next: ConsoleState = {
    ...state,
    entries: [...state.entries, entry],
    seenSeqs: new Set(state.seenSeqs).add(entry.seq),
    bindings: { ...state.bindings },
    announcements: [...state.announcements],
    pending: { ...state.pending },
  };
  switch (entry.kind) {
    case "state_change": {
      const change = entry as StateChangeEntry;
      next.sessionState = change.state;
      if (change.state === "failed" && change.reason) {
        next.failureReason = change.reason;
      }
      break;
    }
    case "event":
      next.eventSeen = true;
      break;
    case "instruction": {
      const instruction = entry as InstructionEntry;
      next.pending[instruction.correlation] = {
        role: instruction.role,
        verb: instruction.verb,
        text: instruction.args?.text ?? null,
        afterEvent: state.eventSeen,
      };
      break;
    }
    case "dispatch_result": {
      const result = entry as DispatchResultEntry;
      const instruction = next.pending[result.correlation];
      if (instruction) {
        next.bindings[instruction.role] = {
          deviceId: result.device_id,
          routeKind: result.route?.kind ?? "?",
        };
        if (result.outcome === "ok") {
          if (instruction.verb === "show" && instruction.text !== null) {
            next.displayText = instruction.text;
          }
          if (instruction.verb === "announce" && instruction.text !== null) {
            next.announcements.push(instruction.text);
            if (instruction.afterEvent) {
              next.alert = instruction.text;
            }
          }
        }
      }
      break;
    }
    default:
      break; // "error" and unknown kinds surface in the log pane only
  }
  return next;
}

export function applyEntries(state: ConsoleState, entries: LogEntry[]): ConsoleState {
  return entries.reduce(applyEntry, state);
}
