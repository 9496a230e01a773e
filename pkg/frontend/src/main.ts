/** Operator/tourist console: start a session, steer the group, watch the
 * bound devices react. All pane content is a render of server data; steering
 * and requests update the UI only from the responses and the stream. */

import { startSession, steer, streamSession } from "./api.js";
import { applyEntry, connectionChanged, headingConfirmed, initialState, sessionStarted } from "./state.js";
import type { ConsoleState } from "./state.js";
import type { LogEntry } from "./types.js";

let state: ConsoleState = initialState();
let stopStream: (() => void) | null = null;

const $ = <T extends HTMLElement>(selector: string): T => {
  const el = document.querySelector<T>(selector);
  if (el === null) {
    throw new Error(`missing element ${selector}`);
  }
  return el;
};

function serverBase(): string {
  return $<HTMLInputElement>("#server-url").value.replace(/\/+$/, "");
}

function simBase(): string {
  return $<HTMLInputElement>("#sim-url").value.replace(/\/+$/, "");
}

function toast(message: string): void {
  const el = $("#toast");
  el.textContent = message;
  el.classList.add("visible");
  setTimeout(() => el.classList.remove("visible"), 2500);
}

function update(next: ConsoleState): void {
  state = next;
  render();
}

function render(): void {
  $("#conn-dot").className = `dot ${state.connection}`;
  $("#conn-label").textContent = state.connection;
  $("#session-id").textContent = state.sessionId ?? "–";
  $("#session-state").textContent = state.sessionState || "–";

  const failure = $("#failure");
  failure.textContent = state.failureReason ?? "";
  failure.style.display = state.failureReason ? "block" : "none";

  const bindings = Object.entries(state.bindings);
  $("#bindings").innerHTML = bindings.length
    ? bindings
        .map(
          ([role, b]) =>
            `<tr><td>${role}</td><td>${b.deviceId}</td><td><span class="route ${b.routeKind}">${b.routeKind}</span></td></tr>`,
        )
        .join("")
    : '<tr><td colspan="3" class="empty">no bindings yet</td></tr>';

  $("#display-pane").textContent = state.displayText ?? "";
  $("#announcements").innerHTML = state.announcements
    .map((text) => `<li>${escapeHtml(text)}</li>`)
    .join("");

  const banner = $("#alert-banner");
  banner.textContent = state.alert ?? "";
  banner.style.display = state.alert ? "block" : "none";

  for (const button of document.querySelectorAll<HTMLButtonElement>("[data-heading]")) {
    button.classList.toggle("active", button.dataset.heading === state.heading);
  }

  $("#log-pane").innerHTML = state.entries
    .map((entry) => `<div class="log-row ${entry.kind}">${escapeHtml(formatEntry(entry))}</div>`)
    .join("");
}

function escapeHtml(text: string): string {
  return text.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;");
}

function formatEntry(entry: LogEntry): string {
  switch (entry.kind) {
    case "instruction":
      return `#${entry.seq} ${entry.role}.${entry.verb}(${JSON.stringify(entry.args)})`;
    case "dispatch_result":
      return `#${entry.seq} -> ${entry.device_id} ${entry.outcome}${entry.code ? ` [${entry.code}]` : ""}`;
    case "event":
      return `#${entry.seq} event ${entry.event_type} from ${entry.device_id} ${JSON.stringify(entry.payload)}`;
    case "state_change":
      return `#${entry.seq} session ${entry.state}${entry.reason ? `: ${entry.reason}` : ""}`;
    case "error":
      return `#${entry.seq} error ${entry.code}: ${entry.message}`;
    default:
      return `#${entry.seq} ${JSON.stringify(entry)}`;
  }
}

async function onStart(): Promise<void> {
  const destination = $<HTMLInputElement>("#destination").value.trim();
  if (!destination) {
    toast("enter a destination first");
    return;
  }
  stopStream?.();
  const x = Number($<HTMLInputElement>("#user-x").value) || 0;
  const y = Number($<HTMLInputElement>("#user-y").value) || 0;
  const result = await startSession(serverBase(), "station_nav", { destination }, {
    zone: "station",
    x,
    y,
  });
  if (!result.ok || !result.sessionId) {
    update(connectionChanged(state, "offline"));
    toast(result.error ?? "request failed");
    return;
  }
  update(sessionStarted(state, result.sessionId));
  stopStream = streamSession(serverBase(), result.sessionId, {
    onOpen: () => update(connectionChanged(state, "live")),
    onEntry: (entry) => update(applyEntry(state, entry)),
    onClose: () => update(connectionChanged(state, "closed")),
    onError: () => update(connectionChanged(state, "offline")),
  });
}

async function onSteer(heading: string): Promise<void> {
  const result = await steer(simBase(), heading);
  if (result.ok) {
    update(headingConfirmed(state, heading));
  } else {
    toast(`steer failed (HTTP ${result.status || "unreachable"})`);
  }
}

export function wire(): void {
  $("#start").addEventListener("click", () => void onStart());
  $<HTMLInputElement>("#destination").addEventListener("keydown", (e) => {
    if (e.key === "Enter") {
      void onStart();
    }
  });
  for (const button of document.querySelectorAll<HTMLButtonElement>("[data-heading]")) {
    button.addEventListener("click", () => void onSteer(button.dataset.heading ?? ""));
  }
  render();
}

wire();
