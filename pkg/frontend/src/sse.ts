/** Incremental server-sent-events parser for fetch streaming bodies. */

export interface SseParser {
  push(chunk: string): void;
  /** flush a final unterminated block (stream closed) */
  end(): void;
}

export function createSseParser(onData: (data: string) => void): SseParser {
  let buffer = "";

  function emitBlock(block: string): void {
    for (const line of block.split("\n")) {
      if (line.startsWith("data: ")) {
        onData(line.slice("data: ".length));
      }
    }
  }

  return {
    push(chunk: string): void {
      buffer += chunk;
      let boundary = buffer.indexOf("\n\n");
      while (boundary >= 0) {
        emitBlock(buffer.slice(0, boundary));
        buffer = buffer.slice(boundary + 2);
        boundary = buffer.indexOf("\n\n");
      }
    },
    end(): void {
      if (buffer.length > 0) {
        emitBlock(buffer);
        buffer = "";
      }
    },
  };
}
