import type { LogEntry } from "../src/types.js";

/** A session log as `GET /sessions/{id}` returns it for the station
 * scenario: request handled, one correct-direction event, one
 * wrong-direction event that triggers the alert announcement. */
export const SESSION_LOG: LogEntry[] = [
  { seq: 1, kind: "state_change", at: 1000, state: "running" },
  {
    seq: 2, kind: "instruction", at: 1001, correlation: "s-1-c1",
    role: "disp", verb: "show", args: { text: "Platform 4 EAST" },
  },
  {
    seq: 3, kind: "dispatch_result", at: 1002, correlation: "s-1-c1",
    outcome: "ok", code: null, message: null, attempts: 1, device_id: "disp-rest-1",
    route: { kind: "direct-rest", endpoint: "http://127.0.0.1:1" },
  },
  {
    seq: 4, kind: "instruction", at: 1003, correlation: "s-1-c2",
    role: "spk", verb: "announce", args: { text: "Platform 4 EAST" },
  },
  {
    seq: 5, kind: "dispatch_result", at: 1004, correlation: "s-1-c2",
    outcome: "ok", code: null, message: null, attempts: 1, device_id: "spk-native-1",
    route: { kind: "via-gateway", gateway_id: "gw-1" },
  },
  {
    seq: 6, kind: "instruction", at: 1005, correlation: "s-1-c3",
    role: "cam", verb: "monitor", args: { target: "A1" },
  },
  {
    seq: 7, kind: "dispatch_result", at: 1006, correlation: "s-1-c3",
    outcome: "ok", code: null, message: null, attempts: 1, device_id: "cam-rest-1",
    route: { kind: "direct-rest", endpoint: "http://127.0.0.1:2" },
  },
  {
    seq: 8, kind: "event", at: 2000, device_id: "cam-rest-1",
    event_type: "movement", payload: { direction: "east" },
  },
  {
    seq: 9, kind: "event", at: 2500, device_id: "cam-rest-1",
    event_type: "movement", payload: { direction: "north" },
  },
  {
    seq: 10, kind: "instruction", at: 2501, correlation: "s-1-c4",
    role: "spk", verb: "announce", args: { text: "Wrong way: Platform 4 is to the EAST" },
  },
  {
    seq: 11, kind: "dispatch_result", at: 2502, correlation: "s-1-c4",
    outcome: "ok", code: null, message: null, attempts: 1, device_id: "spk-native-1",
    route: { kind: "via-gateway", gateway_id: "gw-1" },
  },
];
