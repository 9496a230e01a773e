/** Shapes received from the coordination server and the sim controller. */

export interface LogEntry {
  seq: number;
  kind: "state_change" | "instruction" | "dispatch_result" | "event" | "error";
  at: number;
  [key: string]: unknown;
}

export interface InstructionEntry extends LogEntry {
  kind: "instruction";
  correlation: string;
  role: string;
  verb: string;
  args: Record<string, string>;
}

export interface DispatchResultEntry extends LogEntry {
  kind: "dispatch_result";
  correlation: string;
  outcome: "ok" | "device_error" | "timeout" | "transport_error";
  device_id: string;
  route: { kind: string; endpoint?: string; gateway_id?: string };
  attempts: number;
  code: string | null;
  message: string | null;
}

export interface StateChangeEntry extends LogEntry {
  kind: "state_change";
  state: "running" | "completed" | "failed";
  reason?: string;
}

export interface RoleBinding {
  deviceId: string;
  routeKind: string;
}

export type Connection = "offline" | "connecting" | "live" | "closed";

export interface DeviceState {
  last_text: string | null;
  announcements: string[];
  monitoring: boolean;
}
