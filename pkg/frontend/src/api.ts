/** Thin clients for the coordination server and the sim controller. */

import { createSseParser } from "./sse.js";
import type { DeviceState, LogEntry } from "./types.js";

export interface StartResult {
  ok: boolean;
  sessionId?: string;
  error?: string;
}

export async function startSession(
  server: string,
  logic: string,
  params: Record<string, string>,
  user: { zone: string; x: number; y: number },
  fetchImpl: typeof fetch = fetch,
): Promise<StartResult> {
  try {
    const resp = await fetchImpl(`${server}/sessions`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ logic, params, user }),
    });
    const body = await resp.json();
    if (resp.status === 201) {
      return { ok: true, sessionId: body.session_id };
    }
    return { ok: false, error: body?.error?.message ?? `HTTP ${resp.status}` };
  } catch (err) {
    return { ok: false, error: String(err) };
  }
}

export interface SteerResult {
  ok: boolean;
  status: number;
}

export async function steer(
  sim: string,
  heading: string,
  fetchImpl: typeof fetch = fetch,
): Promise<SteerResult> {
  try {
    const resp = await fetchImpl(`${sim}/sim/steer`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ heading }),
    });
    return { ok: resp.status === 200, status: resp.status };
  } catch {
    return { ok: false, status: 0 };
  }
}

export async function deviceState(
  sim: string,
  deviceId: string,
  fetchImpl: typeof fetch = fetch,
): Promise<DeviceState | null> {
  try {
    const resp = await fetchImpl(`${sim}/sim/devices/${deviceId}/state`);
    return resp.status === 200 ? ((await resp.json()) as DeviceState) : null;
  } catch {
    return null;
  }
}

export interface StreamHandlers {
  onEntry(entry: LogEntry): void;
  onOpen?(): void;
  onClose?(): void;
  onError?(err: unknown): void;
}

/** Consume the session's SSE stream; returns a function that aborts it. */
export function streamSession(
  server: string,
  sessionId: string,
  handlers: StreamHandlers,
  fetchImpl: typeof fetch = fetch,
): () => void {
  const controller = new AbortController();
  const parser = createSseParser((data) => {
    try {
      handlers.onEntry(JSON.parse(data) as LogEntry);
    } catch (err) {
      handlers.onError?.(err);
    }
  });

  (async () => {
    try {
      const resp = await fetchImpl(`${server}/sessions/${sessionId}/stream`, {
        signal: controller.signal,
      });
      if (resp.status !== 200 || resp.body === null) {
        handlers.onError?.(new Error(`stream HTTP ${resp.status}`));
        handlers.onClose?.();
        return;
      }
      handlers.onOpen?.();
      const reader = resp.body.getReader();
      const decoder = new TextDecoder();
      for (;;) {
        const { value, done } = await reader.read();
        if (done) {
          break;
        }
        parser.push(decoder.decode(value, { stream: true }));
      }
      parser.end();
      handlers.onClose?.();
    } catch (err) {
      if (!controller.signal.aborted) {
        handlers.onError?.(err);
      }
      handlers.onClose?.();
    }
  })();

  return () => controller.abort();
}
